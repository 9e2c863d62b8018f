"""Multi-term, multi-task stacked boosting for valence/arousal and expression recognition."""

__version__ = "0.1.0"
