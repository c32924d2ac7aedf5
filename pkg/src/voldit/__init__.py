"""Latent diffusion transformers for volumetric data, with a control adapter and evaluation metrics."""

from .codec import LatentNormalizer, LatentSpec, decode, encode
from .config import RunConfig
from .diffusion import NoiseSchedule, cosine_schedule, sample
from .dit import MODEL_SIZES, DiTConfig, DiTModel, make_config
from .errors import ConfigError, ContractError, DimensionError, VolDiTError
from .tgca import AdapterConfig, ControlAdapter

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "ConfigError",
    "ContractError",
    "ControlAdapter",
    "DiTConfig",
    "DiTModel",
    "DimensionError",
    "LatentNormalizer",
    "LatentSpec",
    "MODEL_SIZES",
    "NoiseSchedule",
    "RunConfig",
    "VolDiTError",
    "cosine_schedule",
    "decode",
    "encode",
    "make_config",
    "sample",
]
