"""Differentiable 3D Gaussian splatting with depth, edge-aware and total-variation regularizers."""

from .gaussians import Camera, GaussianPrimitive, InvalidParameterError, Scene
from .photometric import LossWeights
from .raster import rasterize, render_color, render_depth, render_depth_enhanced, render_vjp
from .trainer import TrainConfig, TrainingError, check_gradients, total_loss, train

__all__ = [
    "Camera",
    "GaussianPrimitive",
    "InvalidParameterError",
    "LossWeights",
    "Scene",
    "TrainConfig",
    "TrainingError",
    "check_gradients",
    "rasterize",
    "render_color",
    "render_depth",
    "render_depth_enhanced",
    "render_vjp",
    "total_loss",
    "train",
]
