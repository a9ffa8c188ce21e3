"""Per-pixel CNN features, cost-sensitive fine-tuning and linear-SVM contour detection."""

__version__ = "0.1.0"
