"""Blind image denoising with learned feature- and pixel-level adversarial priors."""

__version__ = "0.1.0"
