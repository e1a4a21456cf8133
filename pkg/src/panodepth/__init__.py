"""Depth estimation for 360-degree indoor panoramas: synthetic rendering,
a numpy autodiff core, UResNet/RectNet, training and evaluation."""

__version__ = "0.1.0"
