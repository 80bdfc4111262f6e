"""Weather-robust Gaussian-splat reconstruction.

Decomposes weather-degraded multi-view captures into a clean Gaussian
scene, a volumetric extinction field with a learned airlight color, and
per-view particulate residuals, optimized jointly with geometry-guided
gradient scaling.
"""

from .estimator import NotFittedError, SplatReconstructor
from .gaussians import Camera, GaussianCloud, render, render_forward
from .imaging import psnr, read_png, read_raw, ssim, write_png, write_raw
from .scattering import AirlightNet, ExtinctionGrid
from .trainer import TrainConfig, TrainedModel, Trainer, View, train
from .validation import DataError, NumericalAbort
from .weathergen import SceneSpec, WeatherSpec, build_scene, compose_dataset, load_dataset

__version__ = "0.1.0"

__all__ = [
    "AirlightNet",
    "Camera",
    "DataError",
    "ExtinctionGrid",
    "GaussianCloud",
    "NotFittedError",
    "NumericalAbort",
    "SceneSpec",
    "SplatReconstructor",
    "TrainConfig",
    "TrainedModel",
    "Trainer",
    "View",
    "WeatherSpec",
    "build_scene",
    "compose_dataset",
    "load_dataset",
    "psnr",
    "read_png",
    "read_raw",
    "render",
    "render_forward",
    "ssim",
    "train",
    "write_png",
    "write_raw",
]
