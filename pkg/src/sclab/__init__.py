"""Score-based generation with classifier guidance and a self-calibration
regularizer for time-dependent classifiers, at 2D toy scale."""

__version__ = "0.1.0"
