"""Tables and static SVG charts computed from a run's ``metrics.csv``.

``report/iterations.csv`` has one row per (x_percent, iteration) present in
the metrics. Iteration 0 is plain BC on the original data; iteration k > 0
is BC on the data after k stitching iterations. Columns::

    x_percent,iteration,policy_return_mean,policy_return_std,n_policies,stored_mean_return

Empty cells mean the quantity was not measured. ``report/summary.csv`` holds
one row per x_percent with seed-averaged final metrics. Output bytes depend
only on the metrics file.
"""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ITERATION_FIELDS = ("x_percent", "iteration", "policy_return_mean", "policy_return_std", "n_policies",
                    "stored_mean_return")
SUMMARY_METRICS = ("bc_return", "tsbc_return", "wbc_return", "kl_bc", "kl_tsbc", "action_mse_bc",
                   "action_mse_tsbc")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class MissingMetrics(FileNotFoundError):
    pass


def _cell(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def _group(rows: Sequence[dict]) -> Dict[Tuple[str, float, int], List[float]]:
    g: Dict[Tuple[str, float, int], List[float]] = defaultdict(list)
    for r in rows:
        g[(r["metric"], r["x_percent"], r["iteration"])].append(r["value"])
    return g


def iteration_table(rows: Sequence[dict]) -> List[dict]:
    g = _group(rows)
    keys = set()
    for (metric, x, it) in g:
        if (metric == "bc_return" and it == 0) or (metric == "tsbc_return" and it > 0) or metric == "stored_mean_return":
            keys.add((x, it))
    table = []
    for x, it in sorted(keys):
        vals = g.get(("bc_return" if it == 0 else "tsbc_return", x, it), [])
        stored = g.get(("stored_mean_return", x, it))
        table.append({
            "x_percent": x, "iteration": it,
            "policy_return_mean": float(np.mean(vals)) if vals else None,
            "policy_return_std": float(np.std(vals)) if vals else None,
            "n_policies": len(vals),
            "stored_mean_return": float(np.mean(stored)) if stored else None,
        })
    return table


def summary_table(rows: Sequence[dict]) -> List[dict]:
    by_metric: Dict[Tuple[str, float], Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["metric"] in SUMMARY_METRICS:
            by_metric[(r["metric"], r["x_percent"])][r["iteration"]].append(r["value"])
    xs = sorted({x for (_, x) in by_metric})
    out = []
    for x in xs:
        rec = {"x_percent": x}
        for m in SUMMARY_METRICS:
            its = by_metric.get((m, x))
            # final iteration for TS metrics, iteration 0 for baselines
            rec[m] = float(np.mean(its[max(its)])) if its else None
        out.append(rec)
    return out


def _write_csv(path: str, fields: Sequence[str], records: Sequence[dict], header: str = "") -> None:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for rec in records:
        row = []
        for f in fields:
            v = rec[f]
            row.append(str(v) if isinstance(v, int) else _cell(v))
        w.writerow(row)
    with open(path, "w") as f:
        f.write(buf.getvalue())


def read_table(path: str) -> List[dict]:
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        out.append({k: (None if v == "" else float(v)) for k, v in rec.items()})
    return out


# ---------------------------------------------------------------------------
# svg


def _nice_ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if not np.isfinite(lo) or not np.isfinite(hi):
        return []
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(round(v, 10)) for v in np.arange(start, hi + step * 1e-9, step)]


def line_chart(series: Sequence[Tuple[str, Sequence[float], Sequence[float]]], title: str, xlabel: str,
               ylabel: str, header: str = "", width: int = 520, height: int = 340) -> str:
    """Minimal SVG line chart; ``series`` holds (label, xs, ys)."""
    ml, mr, mt, mb = 64, 130, 36, 48
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y0, y1 = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 1, x1 + 1
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if header:
        out.append("<!-- " + header.strip().lstrip("# ").replace("--", "-") + " -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
               f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
    for t in _nice_ticks(y0, y1):
        out.append(f'<line x1="{ml - 4}" y1="{py(t):.2f}" x2="{ml}" y2="{py(t):.2f}" stroke="#444"/>')
        out.append(f'<text x="{ml - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{t:g}</text>')
    for t in sorted(set(xs_all)):
        out.append(f'<line x1="{px(t):.2f}" y1="{mt + ph}" x2="{px(t):.2f}" y2="{mt + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{px(t):.2f}" y="{mt + ph + 16}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>')
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        if len(xs) > 1:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = mt + 14 + 16 * k
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(run_dir: str, header: str = "") -> List[str]:
    """Write the report files for ``run_dir``; returns their paths."""
    from .pipeline import read_metrics

    path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise MissingMetrics(f"missing prerequisite artifact: {path}")
    rows = read_metrics(path)
    out_dir = os.path.join(run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    it_rows = iteration_table(rows)
    p = os.path.join(out_dir, "iterations.csv")
    _write_csv(p, ITERATION_FIELDS, it_rows, header)
    written.append(p)

    summ = summary_table(rows)
    p = os.path.join(out_dir, "summary.csv")
    _write_csv(p, ("x_percent",) + SUMMARY_METRICS, summ, header)
    written.append(p)

    series = []
    for label, key in (("BC", "bc_return"), ("TS+BC", "tsbc_return"), ("weighted BC", "wbc_return")):
        pts = [(r["x_percent"], r[key]) for r in summ if r[key] is not None]
        if pts:
            series.append((label, [a for a, _ in pts], [b for _, b in pts]))
    p = os.path.join(out_dir, "returns.svg")
    with open(p, "w") as f:
        f.write(line_chart(series, "Evaluated return by expert fraction", "expert trajectories (%)",
                           "mean return", header))
    written.append(p)

    series = []
    for x in sorted({r["x_percent"] for r in it_rows}):
        pts = [(r["iteration"], r["policy_return_mean"]) for r in it_rows
               if r["x_percent"] == x and r["policy_return_mean"] is not None]
        if len(pts) > 1:
            series.append((f"x = {x:g}%", [a for a, _ in pts], [b for _, b in pts]))
    p = os.path.join(out_dir, "iterations.svg")
    with open(p, "w") as f:
        f.write(line_chart(series, "BC return across stitching iterations", "iteration", "mean return", header))
    written.append(p)
    return written
