"""Bi-directional collaborative learning for weakly supervised concealed-object segmentation,
at desk scale: a numpy autodiff core, small conv segmenters and a three-stage trainer."""

__version__ = "0.1.0"
