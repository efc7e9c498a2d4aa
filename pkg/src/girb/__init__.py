"""Group-wise isotonic calibration of multi-dimensional proxy scores."""

__version__ = "0.1.0"
