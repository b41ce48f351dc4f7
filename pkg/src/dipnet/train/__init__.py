"""Optimization, training modes, evaluation metrics and diagnostics."""

from .diagnostics import DomainReport, domain_report, sample_divergence
from .evaluate import EvalRow, denoise_image, evaluate, evenly_spaced, noise_sensitivity_sweep
from .metrics import psnr, ssim
from .optim import Adam, AdamState, adam_step, cosine_lr
from .trainer import DivergenceError, TrainConfig, Trainer, load_generator, train

__all__ = [
    "Adam", "AdamState", "DivergenceError", "DomainReport", "EvalRow", "TrainConfig", "Trainer", "adam_step",
    "cosine_lr", "denoise_image", "domain_report", "evaluate", "evenly_spaced", "load_generator",
    "noise_sensitivity_sweep", "psnr", "sample_divergence", "ssim", "train",
]
