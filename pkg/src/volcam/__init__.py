"""Volumetric CNN classification with Grad-CAM explanations, built on a small numpy autodiff core."""

__version__ = "0.1.0"
