"""Parameter containers, initializers and the Adam optimizer."""

from __future__ import annotations

import hashlib
import math
from typing import Iterable

import numpy as np

from .tensor import Tensor


class ParameterSet:
    """Ordered ``name -> Tensor`` mapping owned by a model."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor._wrap(np.array(value, order="C"))  # keeps 0-d scalars 0-d
        t.requires_grad = trainable
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._params.items()}

    def count(self) -> int:
        return int(sum(v.size for v in self._params.values()))

    def set_trainable(self, flag: bool) -> None:
        for v in self._params.values():
            v.requires_grad = flag
            v.grad = None

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, v in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> None:
        for v in self._params.values():
            v.data = v.data.astype(dtype)
            v.grad = None


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    """Adaptive moment estimation over a list of leaf tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self._buffers: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        # python floats keep float32 state from being promoted
        c1 = 1.0 - self.b1**self.t
        c2 = math.sqrt(1.0 - self.b2**self.t)
        step = self.lr / c1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            buf = self._scratch(p)
            m *= self.b1
            np.multiply(g, 1.0 - self.b1, out=buf)
            m += buf
            v *= self.b2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.b2
            v += buf
            np.sqrt(v, out=buf)
            buf *= 1.0 / c2
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= step
            p.data -= buf

    def _scratch(self, p: Tensor) -> np.ndarray:
        # one reusable buffer per shape avoids reallocating large temporaries
        key = (p.shape, p.data.dtype.str)
        buf = self._buffers.get(key)
        if buf is None:
            buf = self._buffers[key] = np.empty(p.shape, dtype=p.data.dtype)
        return buf
