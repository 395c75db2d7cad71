"""Weakly-supervised scene flow with joint ego-motion and FG/BG segmentation,
on a small numpy autodiff engine."""

__version__ = "0.1.0"
