"""Gated-convolution inpainting and residual-based tumor segmentation."""

__version__ = "0.1.0"
