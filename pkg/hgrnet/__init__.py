"""Two-stage hand segmentation and gesture recognition networks on a numpy autodiff core."""

__version__ = "1.0.0"
