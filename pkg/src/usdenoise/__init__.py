"""Ultrasound speckle denoising with a stripe-attention encoder and refined skips."""

__version__ = "0.1.0"

from .errors import (ConfigError, ConfigMismatchError, ContractError, DatasetError, FormatError,
                     NumericError, USDenoiseError)
from .imagio import ImageTensor, PhantomSpec, load_image, save_image, synth_phantom
from .metrics import psnr, rmse, ssim
from .network import MICRO_CONFIG, FULL_CONFIG, Denoiser, ModelConfig, build_model, denoise
from .speckle import NoiseSpec, add_speckle, lee_filter, median_filter

__all__ = [
    "ConfigError", "ConfigMismatchError", "ContractError", "DatasetError", "FormatError",
    "NumericError", "USDenoiseError", "ImageTensor", "PhantomSpec", "load_image", "save_image",
    "synth_phantom", "psnr", "rmse", "ssim", "MICRO_CONFIG", "FULL_CONFIG", "Denoiser", "ModelConfig",
    "build_model", "denoise", "NoiseSpec", "add_speckle", "lee_filter", "median_filter",
]
