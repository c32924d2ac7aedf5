"""Invertible volumetric codec built from an orthonormal 3-D Haar packet transform.

One level splits every channel into eight subbands and halves each spatial
axis.  Subband ``b = 4*bd + 2*bh + bw`` (``0`` = low-pass, ``1`` = high-pass per
axis), so the channel order within each input channel is LLL, LLH, LHL, LHH,
HLL, HLH, HHL, HHH, and output channel ``c*8 + b`` comes from input channel
``c``.  Applying the level again to *all* subbands gives ``C * 8**levels``
channels at ``1 / 2**levels`` resolution per axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError

SUBBAND_ORDER = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")

_R2 = np.sqrt(0.5)


@dataclass(frozen=True)
class LatentSpec:
    levels: int = 3
    input_channels: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"codec levels must be >= 1, got {self.levels}")
        if self.input_channels < 1:
            raise ConfigError(f"input channels must be >= 1, got {self.input_channels}")

    @property
    def latent_channels(self) -> int:
        return self.input_channels * 8**self.levels

    @property
    def factor(self) -> int:
        return 2**self.levels

    def latent_extents(self, extents) -> tuple[int, int, int]:
        f = self.factor
        if any(e % f for e in extents):
            raise DimensionError(f"extents {tuple(extents)} not divisible by 2**levels = {f}")
        return tuple(e // f for e in extents)

    def to_dict(self) -> dict:
        return asdict(self) | {"subband_order": list(SUBBAND_ORDER)}


def _split(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    odd = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return (even + odd) * _R2, (even - odd) * _R2


def _merge(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    even = (lo + hi) * _R2
    odd = (lo - hi) * _R2
    shape = list(lo.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=np.result_type(lo, hi))
    idx = [slice(None)] * lo.ndim
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = even
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = odd
    return out


def _analysis_level(x: np.ndarray) -> np.ndarray:
    # x: (..., C, D, H, W) -> (..., 8C, D/2, H/2, W/2)
    bands = [x]
    for axis in (-3, -2, -1):
        bands = [part for b in bands for part in _split(b, axis)]
    stacked = np.stack(bands, axis=-4)  # (..., C, 8, d, h, w)
    return stacked.reshape(stacked.shape[:-5] + (stacked.shape[-5] * 8,) + stacked.shape[-3:])


def _synthesis_level(z: np.ndarray) -> np.ndarray:
    c8 = z.shape[-4]
    z = z.reshape(z.shape[:-4] + (c8 // 8, 8) + z.shape[-3:])
    bands = [z[..., i, :, :, :] for i in range(8)]
    for axis in (-1, -2, -3):
        bands = [_merge(bands[i], bands[i + 1], axis) for i in range(0, len(bands), 2)]
    return bands[0]


def encode(x, spec: LatentSpec) -> np.ndarray:
    """Map ``(C, D, H, W)`` (optionally with leading batch axes) to the Haar latent."""
    x = np.asarray(x)
    if x.ndim < 4:
        raise DimensionError(f"encode expects (..., C, D, H, W), got shape {x.shape}")
    if x.shape[-4] != spec.input_channels:
        raise DimensionError(f"encode: {x.shape[-4]} channels, spec expects {spec.input_channels}")
    spec.latent_extents(x.shape[-3:])
    z = x.astype(np.float64) if x.dtype.kind != "f" else x
    for _ in range(spec.levels):
        z = _analysis_level(z)
    return z


def decode(z, spec: LatentSpec) -> np.ndarray:
    """Exact inverse of :func:`encode`."""
    z = np.asarray(z)
    if z.ndim < 4 or z.shape[-4] != spec.latent_channels:
        raise DimensionError(
            f"decode: expected {spec.latent_channels} latent channels, got shape {z.shape}"
        )
    x = z
    for _ in range(spec.levels):
        x = _synthesis_level(x)
    return x


class LatentNormalizer:
    """Per-channel standardization of latents before diffusion.

    Haar low-pass channels carry amplitudes around ``2**(1.5*levels)`` times the
    voxel scale while high-pass channels are close to zero; standardizing puts
    every channel on the unit scale the noise schedule assumes.
    """

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def identity(cls, channels: int) -> "LatentNormalizer":
        return cls(np.zeros(channels), np.ones(channels))

    @classmethod
    def fit(cls, latents: np.ndarray, floor: float = 1e-3) -> "LatentNormalizer":
        # latents: (N, C, D, H, W)
        lat = np.asarray(latents, dtype=np.float64)
        mean = lat.mean(axis=(0, 2, 3, 4))
        std = lat.std(axis=(0, 2, 3, 4))
        return cls(mean, np.maximum(std, floor * max(std.max(), 1e-12)))

    def _bcast(self, v, ndim):
        return v.reshape((-1,) + (1,) * 3) if ndim == 4 else v.reshape((1, -1) + (1,) * 3)

    def normalize(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        out = (z - self._bcast(self.mean, z.ndim)) / self._bcast(self.std, z.ndim)
        return out.astype(z.dtype, copy=False)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        out = z * self._bcast(self.std, z.ndim) + self._bcast(self.mean, z.ndim)
        return out.astype(z.dtype, copy=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentNormalizer":
        return cls(d["mean"], d["std"])
