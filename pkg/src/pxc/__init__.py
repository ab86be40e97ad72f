"""Learned image compression trained against a perceptual quality proxy."""

from .codec import Codec, QuantMode, quantize
from .config import EvalConfig, TrainConfig, build_config, parse_config_file
from .container import (
    decode_array,
    decode_image,
    encode_array,
    encode_image,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    ConfigError,
    CorruptStreamError,
    DimensionError,
    ExternalToolError,
    ExternalToolTimeout,
    InvalidInputError,
    NoOverlapError,
    PxcError,
    TrainingDivergenceError,
    UnsupportedSizeError,
    WrongModelError,
)
from .evaluation import RDPoint, bd_rate, evaluate_report, rd_sweep, runtime_bench
from .metrics import QualityModel, ms_ssim, psnr, quality_batch, ssim
from .proxy import ProxyNet
from .rangecoder import build_cdf_tables, decode_latent, encode_latent
from .training import AlternatingTrainer, train
from .vmaf import VmafClient

__version__ = "0.1.0"

__all__ = [
    "AlternatingTrainer",
    "Codec",
    "ConfigError",
    "CorruptStreamError",
    "DimensionError",
    "EvalConfig",
    "ExternalToolError",
    "ExternalToolTimeout",
    "InvalidInputError",
    "NoOverlapError",
    "ProxyNet",
    "PxcError",
    "QualityModel",
    "QuantMode",
    "RDPoint",
    "TrainConfig",
    "TrainingDivergenceError",
    "UnsupportedSizeError",
    "VmafClient",
    "WrongModelError",
    "bd_rate",
    "build_cdf_tables",
    "build_config",
    "decode_array",
    "decode_image",
    "decode_latent",
    "encode_array",
    "encode_image",
    "encode_latent",
    "evaluate_report",
    "load_checkpoint",
    "ms_ssim",
    "parse_config_file",
    "psnr",
    "quality_batch",
    "quantize",
    "rd_sweep",
    "runtime_bench",
    "save_checkpoint",
    "ssim",
    "train",
]
