"""ViTLR: multi-frame traffic-light detection on a small numpy autodiff core."""

__version__ = "0.1.0"
