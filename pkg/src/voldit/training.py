"""Training loops for the backbone and the control adapter, plus sampling helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import codec
from . import tensor as tc
from .diffusion import NoiseSchedule, huber_loss, q_sample, sample, velocity_target
from .dit import DiTModel
from .errors import ContractError
from .nn import Adam
from .tgca import Control, ControlAdapter

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_val: float = float("inf")
    best_params: dict[str, np.ndarray] | None = None
    rng_state: dict | None = None


def volumes_to_latents(volumes, spec: codec.LatentSpec) -> np.ndarray:
    return np.stack([codec.encode(np.asarray(v, dtype=np.float64), spec) for v in volumes])


def _draw(rng: np.random.Generator, n: int, batch: int, T: int, shape):
    idx = rng.permutation(n)[:batch] if batch <= n else rng.integers(0, n, size=batch)
    t = rng.integers(1, T + 1, size=len(idx))
    eps = rng.standard_normal((len(idx),) + tuple(shape))
    return idx, t, eps


def diffusion_loss(model: DiTModel, z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule,
                   delta: float = 1.0, control: Control | None = None) -> tc.Tensor:
    dt = model.dtype
    z_t = q_sample(z0, t, eps, sched).astype(dt)
    target = velocity_target(z0, eps, t, sched).astype(dt)
    pred = model.forward(tc.as_tensor(z_t), t, control)
    return huber_loss(pred, tc.as_tensor(target), delta)


def validation_loss(model: DiTModel, latents: np.ndarray, sched: NoiseSchedule, seed: int = 1234,
                    delta: float = 1.0, draws: int = 4) -> float:
    """Loss on a fixed seeded set of (t, eps) draws per latent."""
    rng = np.random.default_rng(seed)
    vals = []
    with tc.no_grad():
        for _ in range(draws):
            t = rng.integers(1, sched.T + 1, size=len(latents))
            eps = rng.standard_normal(latents.shape)
            vals.append(diffusion_loss(model, latents, t, eps, sched, delta).item())
    return float(np.mean(vals))


def train_backbone(
    model: DiTModel,
    latents: np.ndarray,
    sched: NoiseSchedule,
    steps: int,
    batch: int = 4,
    lr: float = 1e-4,
    seed: int = 0,
    delta: float = 1.0,
    val_latents: np.ndarray | None = None,
    eval_every: int = 100,
    on_step: Callable[[int, float], None] | None = None,
    on_eval: Callable[[int, float, TrainResult], None] | None = None,
) -> TrainResult:
    """Unconditional velocity-prediction training on normalized latents ``(N, C, D, H, W)``."""
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) == 0:
        raise ContractError("training set is empty")
    model.params.set_trainable(True)
    opt = Adam(model.params.values(), lr=lr)
    rng = np.random.default_rng(seed)
    res = TrainResult()
    val_set = latents if val_latents is None or len(val_latents) == 0 else np.asarray(val_latents)
    for step in range(1, steps + 1):
        idx, t, eps = _draw(rng, len(latents), batch, sched.T, latents.shape[1:])
        opt.zero_grad()
        loss = diffusion_loss(model, latents[idx], t, eps, sched, delta)
        tc.backward(loss)
        opt.step()
        res.losses.append(loss.item())
        if on_step is not None:
            on_step(step, res.losses[-1])
        if step % eval_every == 0 or step == steps:
            v = validation_loss(model, val_set, sched, delta=delta)
            res.val.append((step, v))
            if v < res.best_val:
                res.best_val, res.best_step = v, step
                res.best_params = {k: p.data.copy() for k, p in model.params.items()}
            log.info("step %d loss %.5f val %.5f", step, res.losses[-1], v)
            res.rng_state = rng.bit_generator.state
            if on_eval is not None:
                on_eval(step, v, res)
    res.rng_state = rng.bit_generator.state
    return res


def train_adapter(
    backbone: DiTModel,
    adapter: ControlAdapter,
    latents: np.ndarray,
    masks: np.ndarray,
    sched: NoiseSchedule,
    steps: int,
    batch: int = 4,
    lr: float = 1e-4,
    seed: int = 0,
    delta: float = 1.0,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Fit adapter parameters with the backbone frozen; returns per-step losses."""
    latents = np.asarray(latents, dtype=np.float64)
    masks = np.asarray(masks)
    if len(latents) == 0 or len(masks) == 0:
        raise ContractError("adapter training set is empty")
    if len(latents) != len(masks):
        raise ContractError(f"{len(latents)} latents but {len(masks)} masks")
    flags = {k: p.requires_grad for k, p in backbone.params.items()}
    backbone.params.set_trainable(False)
    adapter.params.set_trainable(False)
    trainable = adapter.learnable()
    for p in trainable:
        p.requires_grad = True
    opt = Adam(trainable, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    try:
        for step in range(1, steps + 1):
            idx, t, eps = _draw(rng, len(latents), batch, sched.T, latents.shape[1:])
            opt.zero_grad()
            ctrl = adapter.control(masks[idx].astype(adapter.dtype))
            loss = diffusion_loss(backbone, latents[idx], t, eps, sched, delta, ctrl)
            tc.backward(loss)
            opt.step()
            losses.append(loss.item())
            if on_step is not None:
                on_step(step, losses[-1])
    finally:
        for k, p in backbone.params.items():
            p.requires_grad = flags[k]
            p.grad = None
    return losses


def generate_latents(
    model: DiTModel,
    sched: NoiseSchedule,
    n: int,
    seed: int,
    mode: str = "deterministic",
    adapter: ControlAdapter | None = None,
    masks: np.ndarray | None = None,
    batch: int = 25,
) -> np.ndarray:
    """Sample ``n`` normalized latents; sample ``i`` uses chain seed ``(seed, i)``.

    With ``adapter`` and ``masks``, sample ``i`` is conditioned on ``masks[i % len(masks)]``.
    Batching never changes which noise a chain sees.
    """
    cfg = model.cfg
    shape = (cfg.latent_channels,) + cfg.latent_extents
    out = []
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        control = None
        if adapter is not None and masks is not None:
            sel = np.array([masks[i % len(masks)] for i in range(start, stop)], dtype=adapter.dtype)
            with tc.no_grad():
                control = adapter.control(sel)
        fn = model.denoiser(control)
        out.append(sample(fn, sched, (stop - start,) + shape, seed, mode, model.dtype, chain_offset=start))
    return np.concatenate(out)


def decode_latents(latents: np.ndarray, spec: codec.LatentSpec, normalizer: codec.LatentNormalizer) -> np.ndarray:
    return np.stack([codec.decode(normalizer.denormalize(z.astype(np.float64)), spec) for z in latents])


__all__ = [
    "TrainResult",
    "decode_latents",
    "diffusion_loss",
    "generate_latents",
    "sample",
    "train_adapter",
    "train_backbone",
    "validation_loss",
    "volumes_to_latents",
]
