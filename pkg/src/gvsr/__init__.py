"""Gradient-variance loss toolkit for single-image super-resolution."""

__version__ = "0.1.0"

from .gradients import GradientPair, sobel_backward, sobel_forward
from .gvloss import (
    CompositeLossSpec,
    LossResult,
    composite_loss,
    gv_loss,
    l1_loss,
    l2_loss,
    patch_variance,
    ssim_loss,
    tv_loss,
    unfold,
)
from .imagecore import bicubic_resize, load_png, make_lr, save_png, to_grayscale
from .metrics import psnr, ssim, variance_profile
from .srmodel import ModelParams, NonFiniteError, forward, load_checkpoint, save_checkpoint
from .trainer import SyntheticSetSpec, TrainConfig, evaluate, make_synthetic_dataset, train

__all__ = [
    "CompositeLossSpec",
    "GradientPair",
    "LossResult",
    "ModelParams",
    "NonFiniteError",
    "SyntheticSetSpec",
    "TrainConfig",
    "__version__",
    "bicubic_resize",
    "composite_loss",
    "evaluate",
    "forward",
    "gv_loss",
    "l1_loss",
    "l2_loss",
    "load_checkpoint",
    "load_png",
    "make_lr",
    "make_synthetic_dataset",
    "patch_variance",
    "psnr",
    "save_checkpoint",
    "save_png",
    "ssim",
    "ssim_loss",
    "to_grayscale",
    "train",
    "tv_loss",
    "unfold",
    "variance_profile",
]
