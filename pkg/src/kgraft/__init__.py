"""Feature grafting: transplant pooled donor-CNN features into a small dense head."""

__version__ = "0.1.0"
