"""Volumetric diffusion transformer with adaLN-Zero blocks.

Token layout: the latent ``(C, D', H', W')`` is cut into ``p**3`` cubes; the
token grid is flattened depth-major, then height, then width.  Inside a token,
patch features are ordered ``(channel, dz, dy, dx)``, the flattening of a
``(F, C, p, p, p)`` convolution kernel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError
from .nn import ParameterSet, xavier_uniform
from .tensor import Tensor

FREQ_DIM = 256

# (depth, hidden, heads)
MODEL_SIZES = {
    "XS": (6, 384, 6),
    "S": (12, 384, 6),
    "B": (12, 768, 12),
    "L": (24, 1152, 16),
}


@dataclass(frozen=True)
class DiTConfig:
    depth: int
    hidden: int
    heads: int
    patch: int
    latent_channels: int
    latent_extents: tuple[int, int, int]
    mlp_ratio: float = 4.0
    size: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "latent_extents", tuple(int(e) for e in self.latent_extents))
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 6:
            raise ConfigError(f"hidden {self.hidden} not divisible by 6 (three-axis sin-cos split)")
        if self.patch < 1 or self.depth < 1:
            raise ConfigError("patch and depth must be positive")
        if any(e % self.patch for e in self.latent_extents):
            raise ConfigError(f"latent extents {self.latent_extents} not divisible by patch {self.patch}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(e // self.patch for e in self.latent_extents)

    @property
    def num_tokens(self) -> int:
        d, h, w = self.latent_extents
        return d * h * w // self.patch**3

    @property
    def patch_dim(self) -> int:
        return self.patch**3 * self.latent_channels

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden * self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_extents"] = list(self.latent_extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        return cls(**{**d, "latent_extents": tuple(d["latent_extents"])})


def make_config(size: str, patch: int = 2, latent_channels: int = 8, extents=(8, 8, 8)) -> DiTConfig:
    try:
        depth, hidden, heads = MODEL_SIZES[size]
    except KeyError:
        raise ConfigError(f"unknown model size {size!r}; choose from {sorted(MODEL_SIZES)}") from None
    return DiTConfig(depth, hidden, heads, patch, latent_channels, tuple(extents), size=size)


def param_shapes(cfg: DiTConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, p, c = cfg.hidden, cfg.patch, cfg.latent_channels
    shapes = [
        ("x_embed.w", (d, c, p, p, p)),
        ("x_embed.b", (d,)),
        ("t_embed.w1", (FREQ_DIM, d)),
        ("t_embed.b1", (d,)),
        ("t_embed.w2", (d, d)),
        ("t_embed.b2", (d,)),
    ]
    m = cfg.mlp_hidden
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        shapes += [
            (pre + "qkv.w", (d, 3 * d)),
            (pre + "qkv.b", (3 * d,)),
            (pre + "proj.w", (d, d)),
            (pre + "proj.b", (d,)),
            (pre + "fc1.w", (d, m)),
            (pre + "fc1.b", (m,)),
            (pre + "fc2.w", (m, d)),
            (pre + "fc2.b", (d,)),
            (pre + "ada.w", (d, 6 * d)),
            (pre + "ada.b", (6 * d,)),
        ]
    shapes += [
        ("final.ada.w", (d, 2 * d)),
        ("final.ada.b", (2 * d,)),
        ("final.proj.w", (d, cfg.patch_dim)),
        ("final.proj.b", (cfg.patch_dim,)),
    ]
    return shapes


def parameter_count(cfg: DiTConfig, include_positional: bool = False) -> int:
    """Backbone size computed from the shape table, without allocating weights."""
    n = sum(math.prod(s) for _, s in param_shapes(cfg))
    if include_positional:
        n += cfg.num_tokens * cfg.hidden
    return n


# ----------------------------------------------------------------------------
# fixed encodings
# ----------------------------------------------------------------------------

def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def posenc3d(grid, d: int) -> np.ndarray:
    """``(N_tok, d)`` table: equal thirds for depth, height and width coordinates."""
    if d % 6:
        raise ConfigError(f"positional width {d} must be divisible by 6")
    gd, gh, gw = grid
    zz, yy, xx = np.meshgrid(np.arange(gd), np.arange(gh), np.arange(gw), indexing="ij")
    g = d // 3
    return np.concatenate(
        [_sincos_1d(g, zz), _sincos_1d(g, yy), _sincos_1d(g, xx)], axis=1
    )


def timestep_frequencies(t, dim: int = FREQ_DIM, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved ``(sin, cos)`` features of integer timesteps, shape ``(B, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out


# ----------------------------------------------------------------------------
# token reshaping
# ----------------------------------------------------------------------------

def patchify_blocks(z: np.ndarray, p: int) -> np.ndarray:
    """Plain block reshape ``(B, C, D, H, W) -> (B, N_tok, C*p**3)`` (identity embedding)."""
    B, C, D, H, W = z.shape
    if D % p or H % p or W % p:
        raise DimensionError(f"extents {(D, H, W)} not divisible by patch {p}")
    x = z.reshape(B, C, D // p, p, H // p, p, W // p, p)
    return x.transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(B, -1, C * p**3).copy()


def patchify(z: Tensor, p: int, embed_w: Tensor, embed_b: Tensor | None = None) -> Tensor:
    """Strided 3-D convolution then grid flattening: ``(B, C, D, H, W) -> (B, N_tok, d)``."""
    D, H, W = z.shape[-3:]
    if D % p or H % p or W % p:
        raise DimensionError(f"extents {(D, H, W)} not divisible by patch {p}")
    y = tc.conv3d(z, embed_w, embed_b, stride=p)  # (B, d, gd, gh, gw)
    B, d = y.shape[0], y.shape[1]
    return tc.transpose(tc.reshape(y, (B, d, -1)), (0, 2, 1))


def unpatchify(y, cfg: DiTConfig):
    """Inverse of :func:`patchify_blocks`: ``(B, N_tok, p**3 C) -> (B, C, D', H', W')``."""
    is_tensor = isinstance(y, Tensor)
    shape = y.shape
    p, c = cfg.patch, cfg.latent_channels
    gd, gh, gw = cfg.grid
    if len(shape) != 3 or shape[1] != cfg.num_tokens or shape[2] != cfg.patch_dim:
        raise DimensionError(
            f"unpatchify: expected (B, {cfg.num_tokens}, {cfg.patch_dim}), got {tuple(shape)}"
        )
    B = shape[0]
    out_shape = (B, c, gd * p, gh * p, gw * p)
    if not is_tensor:
        y = np.asarray(y).reshape(B, gd, gh, gw, c, p, p, p)
        return y.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(out_shape).copy()
    y = tc.reshape(y, (B, gd, gh, gw, c, p, p, p))
    y = tc.transpose(y, (0, 4, 1, 5, 2, 6, 3, 7))
    return tc.reshape(y, out_shape)


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------

def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``x * (1 + scale) + shift`` with per-sample ``(B, d)`` modulation over ``(B, N, d)`` tokens."""
    n = x.shape[1]
    return tc.add(tc.mul(x, tc.add(tc.expand(scale, 1, n), 1.0)), tc.expand(shift, 1, n))


def attention(x: Tensor, params: ParameterSet, prefix: str, heads: int, return_weights: bool = False):
    """Global multi-head self-attention over all tokens of each sample."""
    B, N, d = x.shape
    hd = d // heads
    qkv = tc.linear(x, params[prefix + "qkv.w"], params[prefix + "qkv.b"])
    qkv = tc.transpose(tc.reshape(qkv, (B, N, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = (tc.reshape(t, (B * heads, N, hd)) for t in tc.split(qkv, 3, axis=0))
    scores = tc.scale(tc.matmul(q, tc.swap_last(k)), 1.0 / math.sqrt(hd))
    w = tc.softmax(scores, axis=-1)
    o = tc.matmul(w, v)
    o = tc.reshape(tc.transpose(tc.reshape(o, (B, heads, N, hd)), (0, 2, 1, 3)), (B, N, d))
    out = tc.linear(o, params[prefix + "proj.w"], params[prefix + "proj.b"])
    return (out, w) if return_weights else out


def mlp(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    h = tc.gelu(tc.linear(x, params[prefix + "fc1.w"], params[prefix + "fc1.b"]))
    return tc.linear(h, params[prefix + "fc2.w"], params[prefix + "fc2.b"])


def dit_block(x: Tensor, c: Tensor, params: ParameterSet, prefix: str, heads: int) -> Tensor:
    """adaLN-Zero block; ``c`` is the SiLU-activated timestep embedding ``(B, d)``."""
    mod = tc.linear(c, params[prefix + "ada.w"], params[prefix + "ada.b"])
    shift1, scale1, gate1, shift2, scale2, gate2 = tc.split(mod, 6, axis=-1)
    n = x.shape[1]
    h = attention(modulate(tc.layer_norm(x), shift1, scale1), params, prefix, heads)
    x = tc.add(x, tc.mul(tc.expand(gate1, 1, n), h))
    h = mlp(modulate(tc.layer_norm(x), shift2, scale2), params, prefix)
    return tc.add(x, tc.mul(tc.expand(gate2, 1, n), h))


def final_layer(x: Tensor, c: Tensor, params: ParameterSet) -> Tensor:
    mod = tc.linear(c, params["final.ada.w"], params["final.ada.b"])
    shift, scl = tc.split(mod, 2, axis=-1)
    h = modulate(tc.layer_norm(x), shift, scl)
    return tc.linear(h, params["final.proj.w"], params["final.proj.b"])


class DiTModel:
    """Parameters plus the fixed positional table for one :class:`DiTConfig`."""

    def __init__(self, cfg: DiTConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        for name, shape in param_shapes(cfg):
            self.params.add(name, self._init(name, shape, rng).astype(self.dtype))
        self.pos = posenc3d(cfg.grid, cfg.hidden).astype(self.dtype)

    @staticmethod
    def _init(name: str, shape, rng) -> np.ndarray:
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            return np.zeros(shape)
        if ".ada." in name or name.startswith("final."):
            return np.zeros(shape)  # adaLN-Zero and zero output projection
        if name.startswith("t_embed"):
            return rng.normal(0.0, 0.02, size=shape)
        if name == "x_embed.w":
            fan_in = math.prod(shape[1:])
            return xavier_uniform(rng, fan_in, shape[0], shape)
        return xavier_uniform(rng, shape[0], shape[1], shape)

    def time_embedding(self, t) -> Tensor:
        f = tc.as_tensor(timestep_frequencies(t).astype(self.dtype))
        p = self.params
        h = tc.silu(tc.linear(f, p["t_embed.w1"], p["t_embed.b1"]))
        return tc.linear(h, p["t_embed.w2"], p["t_embed.b2"])

    def embed_tokens(self, z: Tensor) -> Tensor:
        x = patchify(z, self.cfg.patch, self.params["x_embed.w"], self.params["x_embed.b"])
        return tc.add(x, tc.expand(tc.as_tensor(self.pos), 0, x.shape[0]))

    def check_geometry(self, shape) -> None:
        want = (self.cfg.latent_channels,) + self.cfg.latent_extents
        if tuple(shape[-4:]) != want or len(shape) not in (4, 5):
            raise DimensionError(f"latent shape {tuple(shape)} does not match model geometry {want}")

    def forward(self, z_t, t, control=None) -> Tensor:
        """Velocity prediction with the same shape as ``z_t`` (``(C,D,H,W)`` or batched).

        ``control`` is an object with ``begin(t_emb)`` and ``inject(layer, x, state)``
        (see :class:`voldit.tgca.Control`); layers are numbered from 1.
        """
        self.check_geometry(z_t.shape)
        z = z_t if isinstance(z_t, Tensor) else tc.as_tensor(np.asarray(z_t, dtype=self.dtype))
        single = z.ndim == 4
        if single:
            z = tc.reshape(z, (1,) + z.shape)
        B = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        x = self.embed_tokens(z)
        t_emb = self.time_embedding(t)
        c = tc.silu(t_emb)
        state = control.begin(t_emb) if control is not None else None
        for i in range(self.cfg.depth):
            if control is not None:
                x = control.inject(i + 1, x, state)
            x = dit_block(x, c, self.params, f"blocks.{i}.", self.cfg.heads)
        out = unpatchify(final_layer(x, c, self.params), self.cfg)
        return tc.reshape(out, out.shape[1:]) if single else out

    __call__ = forward

    def denoiser(self, control=None):
        """``(z_t, t) -> v_hat`` numpy callable for :func:`voldit.diffusion.sample`."""

        def fn(z, t):
            with tc.no_grad():
                return self.forward(z, t, control).data

        return fn

    def parameter_count(self, include_positional: bool = False) -> int:
        return self.params.count() + (self.pos.size if include_positional else 0)
