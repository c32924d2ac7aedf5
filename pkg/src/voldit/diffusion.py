"""Variance-preserving latent diffusion with velocity targets.

Conventions: ``alpha[t] = sqrt(alpha_bar[t])``, ``sigma[t] = sqrt(1 - alpha_bar[t])``,
``z_t = alpha[t] z0 + sigma[t] eps`` and ``v = alpha[t] eps - sigma[t] z0``.
Index ``t = 0`` is clean data; ``t = 1..T`` are noisy steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .errors import ContractError, DimensionError

Denoiser = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    s: float = 0.008
    max_beta: float = 0.999

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    @property
    def beta(self) -> np.ndarray:
        """Per-step betas; ``beta[0]`` is 0 by convention."""
        b = np.zeros_like(self.alpha_bar)
        b[1:] = 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]
        return b

    def posterior_variance(self, t: int) -> float:
        ab = self.alpha_bar
        return float((1.0 - ab[t - 1]) / (1.0 - ab[t]) * self.beta[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "s": self.s, "max_beta": self.max_beta, "kind": "cosine"}


def cosine_schedule(T: int = 300, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule with per-step betas clipped to ``max_beta``."""
    if T < 1 or s <= 0:
        raise ContractError(f"cosine_schedule needs T >= 1 and s > 0, got T={T}, s={s}")

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    betas = np.array([min(1.0 - f(t) / f(t - 1), max_beta) for t in range(1, T + 1)])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=alpha_bar, s=s, max_beta=max_beta)


def _coef(v: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Gather per-sample coefficients and shape them for broadcasting against ``like``."""
    c = v[np.asarray(t)]
    if np.ndim(c) == 0:
        return np.asarray(c, dtype=like.dtype)
    return c.reshape((-1,) + (1,) * (like.ndim - 1)).astype(like.dtype)


def _check_t(t, sched: NoiseSchedule, lo: int = 1) -> None:
    ta = np.asarray(t)
    if ta.size == 0 or ta.min() < lo or ta.max() > sched.T:
        raise ContractError(f"timestep {t} outside [{lo}, {sched.T}]")


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward corruption. ``t`` may be an int or a per-sample array (leading axis)."""
    if np.shape(z0) != np.shape(eps):
        raise DimensionError(f"q_sample: z0 {np.shape(z0)} vs eps {np.shape(eps)}")
    _check_t(t, sched)
    return _coef(sched.alpha, t, z0) * z0 + _coef(sched.sigma, t, z0) * eps


def velocity_target(z0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    if np.shape(z0) != np.shape(eps):
        raise DimensionError(f"velocity_target: z0 {np.shape(z0)} vs eps {np.shape(eps)}")
    return _coef(sched.alpha, t, z0) * eps - _coef(sched.sigma, t, z0) * z0


def predict_x0_eps_from_v(z_t, v_hat, t, sched: NoiseSchedule):
    if np.shape(z_t) != np.shape(v_hat):
        raise DimensionError(f"shapes differ: {np.shape(z_t)} vs {np.shape(v_hat)}")
    a, s = _coef(sched.alpha, t, z_t), _coef(sched.sigma, t, z_t)
    return a * z_t - s * v_hat, s * z_t + a * v_hat


def huber_loss(pred, target, delta: float = 1.0):
    """Mean smooth-L1 loss. Differentiable when ``pred`` is a Tensor."""
    if isinstance(pred, tc.Tensor):
        return tc.mean(tc.huber(pred, target, delta))
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if delta <= 0:
        raise ContractError("huber: delta must be positive")
    ar = np.abs(r)
    return float(np.where(ar < delta, 0.5 * r * r / delta, ar - 0.5 * delta).mean())


def ddpm_step(z_t, v_hat, t: int, sched: NoiseSchedule, noise=None) -> np.ndarray:
    """One ancestral step using the fixed posterior variance."""
    _check_t(t, sched)
    x0, _ = predict_x0_eps_from_v(z_t, v_hat, t, sched)
    if t == 1:
        return x0
    ab = sched.alpha_bar
    beta = sched.beta[t]
    c0 = math.sqrt(ab[t - 1]) * beta / (1.0 - ab[t])
    ct = math.sqrt(1.0 - beta) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
    mean = c0 * x0 + ct * z_t
    if noise is None:
        return mean.astype(z_t.dtype, copy=False)
    return (mean + math.sqrt(sched.posterior_variance(t)) * noise).astype(z_t.dtype, copy=False)


def ddim_step(z_t, v_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) step from ``t`` to ``t - 1``."""
    _check_t(t, sched)
    x0, eps = predict_x0_eps_from_v(z_t, v_hat, t, sched)
    out = sched.alpha[t - 1] * x0 + sched.sigma[t - 1] * eps
    return out.astype(z_t.dtype, copy=False)


def chain_rngs(seed: int, n: int, offset: int = 0) -> list[np.random.Generator]:
    """Independent per-chain streams keyed by ``(seed, chain index)``."""
    return [np.random.default_rng([int(seed), offset + i]) for i in range(n)]


def sample(
    model: Denoiser,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    seed: int,
    mode: str = "deterministic",
    dtype=np.float32,
    expected_shape: tuple[int, ...] | None = None,
    chain_offset: int = 0,
) -> np.ndarray:
    """Run the full reverse chain from unit Gaussian noise.

    ``model(z_t, t_batch)`` returns the velocity prediction for a batch.
    ``shape`` is ``(B, C, D, H, W)``; chain ``i`` draws from the stream keyed by
    ``(seed, chain_offset + i)``, so splitting a run into batches does not change
    the noise any chain sees.
    """
    if mode not in ("ancestral", "deterministic"):
        raise ContractError(f"unknown sampling mode {mode!r}")
    if expected_shape is not None and tuple(shape[1:]) != tuple(expected_shape):
        raise DimensionError(f"sample shape {shape[1:]} does not match model geometry {expected_shape}")
    rngs = chain_rngs(seed, shape[0], chain_offset)
    z = np.stack([r.standard_normal(shape[1:]) for r in rngs]).astype(dtype)
    for t in range(sched.T, 0, -1):
        tb = np.full(shape[0], t, dtype=np.int64)
        v = np.asarray(model(z, tb), dtype=dtype)
        if mode == "deterministic":
            z = ddim_step(z, v, t, sched)
        else:
            noise = None if t == 1 else np.stack([r.standard_normal(shape[1:]) for r in rngs]).astype(dtype)
            z = ddpm_step(z, v, t, sched, noise)
    return z
