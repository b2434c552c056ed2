"""Memory-bounded 3D Gaussian splatting trainer.

Grows, compensates, and prunes Gaussian primitives under a hard budget while
optimizing a differentiable splatting renderer, entirely on the CPU.
"""

from .config import TrainConfig
from .core_math import Camera, Gaussian, build_covariance, eval_sh_color, look_at_camera
from .forward import RenderOptions, RenderOutput, render, render_depth_at
from .gaussians import GaussianSet, empty_set, init_from_points, make_set
from .metrics import psnr, ssim
from .reference import render_reference
from .scene_io import generate_synthetic, load_checkpoint, load_dataset, save_checkpoint
from .trainer import train

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Gaussian",
    "GaussianSet",
    "RenderOptions",
    "RenderOutput",
    "TrainConfig",
    "build_covariance",
    "empty_set",
    "eval_sh_color",
    "generate_synthetic",
    "init_from_points",
    "load_checkpoint",
    "load_dataset",
    "look_at_camera",
    "make_set",
    "psnr",
    "render",
    "render_depth_at",
    "render_reference",
    "save_checkpoint",
    "ssim",
    "train",
    "__version__",
]
