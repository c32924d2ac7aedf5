"""Timestep-gated control adapter.

A segmentation volume is encoded by strided 3-D convolutions onto the
backbone's token grid, flattened in patchify order, and added to the input of
selected transformer blocks as ``x + lambda_l * gamma(t) * c_tok``.  The last
convolution starts at zero, so a fresh adapter leaves the backbone untouched.
In fixed mode the product ``lambda_l * gamma(t)`` is replaced by a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .dit import DiTConfig
from .errors import ConfigError, ContractError, DimensionError
from .nn import ParameterSet, xavier_uniform
from .tensor import Tensor


@dataclass
class AdapterConfig:
    hidden: int
    cond_channels: int
    input_extents: tuple[int, int, int]
    grid: tuple[int, int, int]
    layers: tuple[int, ...]
    mode: str = "learned"
    pi: float = 1.0
    gate_hidden: int = 128
    stages: int = field(init=False)

    def __post_init__(self):
        self.input_extents = tuple(int(e) for e in self.input_extents)
        self.grid = tuple(int(g) for g in self.grid)
        self.layers = tuple(sorted(int(l) for l in self.layers))
        ratios = {e // g for e, g in zip(self.input_extents, self.grid)}
        if any(e % g for e, g in zip(self.input_extents, self.grid)) or len(ratios) != 1:
            raise ConfigError(f"condition extents {self.input_extents} do not map uniformly onto grid {self.grid}")
        r = ratios.pop()
        if r < 1 or r & (r - 1):
            raise ConfigError(f"downsampling factor {r} must be a power of two")
        self.stages = int(round(math.log2(r)))
        if self.mode not in ("learned", "fixed"):
            raise ConfigError(f"gate mode must be 'learned' or 'fixed', got {self.mode!r}")
        if self.pi < 0:
            raise ContractError(f"fixed conditioning scale must be >= 0, got {self.pi}")

    @classmethod
    def for_backbone(cls, cfg: DiTConfig, cond_channels: int, input_extents, layers=None, **kw) -> "AdapterConfig":
        layers = tuple(range(1, cfg.depth + 1)) if layers is None else tuple(layers)
        if any(l < 1 or l > cfg.depth for l in layers):
            raise ConfigError(f"injection layers {layers} outside 1..{cfg.depth}")
        return cls(cfg.hidden, cond_channels, tuple(input_extents), cfg.grid, layers, **kw)

    def channel_schedule(self) -> list[int]:
        n = self.stages
        return [max(self.hidden // 2 ** (n - 1 - i), 1) for i in range(n)]

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden,
            "cond_channels": self.cond_channels,
            "input_extents": list(self.input_extents),
            "grid": list(self.grid),
            "layers": list(self.layers),
            "mode": self.mode,
            "pi": self.pi,
            "gate_hidden": self.gate_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(
            d["hidden"], d["cond_channels"], tuple(d["input_extents"]), tuple(d["grid"]),
            tuple(d["layers"]), d["mode"], d["pi"], d["gate_hidden"],
        )


class ControlAdapter:
    def __init__(self, acfg: AdapterConfig, seed: int = 0, dtype=np.float64):
        if acfg.stages < 1:
            raise ConfigError("condition encoder needs at least one downsampling stage")
        self.acfg = acfg
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        chans = acfg.channel_schedule()
        c_in = acfg.cond_channels
        for i, c_out in enumerate(chans):
            shape = (c_out, c_in, 2, 2, 2)
            last = i == len(chans) - 1
            w = np.zeros(shape) if last else xavier_uniform(rng, c_in * 8, c_out, shape)
            self.params.add(f"enc.{i}.w", w.astype(self.dtype))
            self.params.add(f"enc.{i}.b", np.zeros(c_out, dtype=self.dtype))
            c_in = c_out
        gh = acfg.gate_hidden
        self.params.add("gate.w1", xavier_uniform(rng, acfg.hidden, gh, (acfg.hidden, gh)).astype(self.dtype))
        self.params.add("gate.b1", np.zeros(gh, dtype=self.dtype))
        self.params.add("gate.w2", np.zeros((gh, 1), dtype=self.dtype))
        self.params.add("gate.b2", np.zeros(1, dtype=self.dtype))
        for l in acfg.layers:
            self.params.add(f"lambda.{l}", np.array(1.0, dtype=self.dtype))

    @property
    def mode(self) -> str:
        return self.acfg.mode

    def learnable(self) -> list[Tensor]:
        """Parameters that receive updates in the current gate mode."""
        if self.mode == "learned":
            return list(self.params.values())
        return [v for k, v in self.params.items() if k.startswith("enc.")]

    def encode_condition(self, s) -> Tensor:
        """``(C_s, D, H, W)`` or batched masks -> control tokens ``(B, N_tok, d)``."""
        a = self.acfg
        x = s if isinstance(s, Tensor) else tc.as_tensor(np.asarray(s, dtype=self.dtype))
        if x.ndim == 4:
            x = tc.reshape(x, (1,) + x.shape)
        if x.ndim != 5 or x.shape[1] != a.cond_channels or tuple(x.shape[2:]) != a.input_extents:
            raise DimensionError(
                f"condition shape {x.shape} does not match ({a.cond_channels}, {a.input_extents})"
            )
        n = a.stages
        for i in range(n):
            x = tc.conv3d(x, self.params[f"enc.{i}.w"], self.params[f"enc.{i}.b"], stride=2)
            if i < n - 1:
                x = tc.silu(x)
        B, d = x.shape[0], x.shape[1]
        return tc.transpose(tc.reshape(x, (B, d, -1)), (0, 2, 1))

    def gate(self, t_emb: Tensor) -> Tensor:
        """Per-sample scalar gate in (0, 1) from the backbone's time embedding ``(B, d)``."""
        if self.mode != "learned":
            raise ContractError("gate() is undefined in fixed-scale mode")
        p = self.params
        h = tc.silu(tc.linear(t_emb, p["gate.w1"], p["gate.b1"]))
        g = tc.sigmoid(tc.linear(h, p["gate.w2"], p["gate.b2"]))
        return tc.reshape(g, (g.shape[0],))

    def set_fixed_scale(self, pi: float) -> "ControlAdapter":
        """Switch to the ablation mode with constant multiplier ``pi`` for every t and layer."""
        if pi < 0:
            raise ContractError(f"fixed conditioning scale must be >= 0, got {pi}")
        self.acfg.mode = "fixed"
        self.acfg.pi = float(pi)
        return self

    def control(self, s) -> "Control":
        return Control(self, self.encode_condition(s))


def inject(x_l: Tensor, c_tok: Tensor, gamma, lambda_l) -> Tensor:
    """``x_l + lambda_l * gamma * c_tok``; ``gamma`` is a scalar or a per-sample ``(B,)`` tensor."""
    if x_l.shape != c_tok.shape:
        raise DimensionError(f"inject: tokens {c_tok.shape} vs activations {x_l.shape}")
    r = c_tok
    if isinstance(lambda_l, Tensor):
        r = tc.mul(r, lambda_l)
    else:
        r = tc.scale(r, lambda_l)
    if isinstance(gamma, Tensor) and gamma.ndim == 1:
        B, N, d = x_l.shape
        r = tc.mul(r, tc.expand(tc.expand(gamma, 1, N), 2, d))
    elif isinstance(gamma, Tensor):
        r = tc.mul(r, gamma)
    else:
        r = tc.scale(r, gamma)
    return tc.add(x_l, r)


class Control:
    """Precomputed control tokens bound to an adapter; passed to ``DiTModel.forward``."""

    def __init__(self, adapter: ControlAdapter, tokens: Tensor):
        self.adapter = adapter
        self.tokens = tokens

    def batch(self, B: int) -> Tensor:
        if self.tokens.shape[0] == B:
            return self.tokens
        if self.tokens.shape[0] == 1:
            return tc.expand(tc.reshape(self.tokens, self.tokens.shape[1:]), 0, B)
        raise DimensionError(f"control batch {self.tokens.shape[0]} vs latent batch {B}")

    def begin(self, t_emb: Tensor):
        toks = self.batch(t_emb.shape[0])
        gamma = self.adapter.gate(t_emb) if self.adapter.mode == "learned" else None
        return toks, gamma

    def inject(self, layer: int, x: Tensor, state) -> Tensor:
        a = self.adapter
        if layer not in a.acfg.layers:
            return x
        toks, gamma = state
        if a.mode == "fixed":
            return inject(x, toks, 1.0, a.acfg.pi)
        return inject(x, toks, gamma, a.params[f"lambda.{layer}"])
