"""Model-based trajectory stitching for offline datasets, with behavioural
cloning on the rewritten data and small exact environments to check it."""

__version__ = "0.1.0"
