"""Procedural volumes with exact ground-truth segmentations.

Each phantom has a smooth dark background, an ellipsoidal "organ" (label 1)
and a bent tubular "vessel" (label 2).  Intensities live in separated bands so
that thresholding recovers the labels; :data:`THRESHOLDS` are the band
midpoints used for mask prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

BACKGROUND_RANGE = (-0.85, -0.65)
ORGAN_RANGE = (0.0, 0.15)
VESSEL_RANGE = (0.6, 0.8)
NOISE_STD = 0.02
NOISE_CLIP = 0.05
ORGAN_RIPPLE = 0.03

# label -> (low, high] intensity interval used for threshold-based prediction
THRESHOLDS = {1: (-0.34, 0.39), 2: (0.39, np.inf)}

MIN_EXTENT = 16
MIN_FRACTION = 0.01


@dataclass
class Phantom:
    volume: np.ndarray  # (1, D, H, W)
    mask: np.ndarray  # (n_labels + 1, D, H, W), channel 0 is background
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.mask.argmax(axis=0)


def _grid(geometry):
    axes = [(np.arange(n) + 0.5) / n for n in geometry]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)  # (D, H, W, 3)


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _bezier_distance(pts: np.ndarray, p0, p1, p2, n: int = 96) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)[:, None]
    curve = (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s**2 * p2
    flat = pts.reshape(-1, 3)
    best = np.full(flat.shape[0], np.inf)
    for c in curve:
        np.minimum(best, ((flat - c) ** 2).sum(axis=1), out=best)
    return np.sqrt(best).reshape(pts.shape[:-1])


def _draw(rng, geometry, n_labels):
    pts = _grid(geometry)
    params: dict = {}

    # background: low-frequency cosine field
    k = rng.integers(1, 3, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    field_ = sum(np.cos(2 * np.pi * (pts @ k[i]) / 2 + phase[i]) for i in range(3)) / 3.0
    lo, hi = BACKGROUND_RANGE
    vol = (lo + hi) / 2 + (hi - lo) / 2 * field_
    labels = np.zeros(geometry, dtype=np.int64)

    center = rng.uniform(0.35, 0.65, size=3)
    axes = rng.uniform(0.18, 0.3, size=3)
    rot = _rotation(rng)
    local = (pts - center) @ rot
    organ = ((local / axes) ** 2).sum(axis=-1) <= 1.0
    organ_level = rng.uniform(*ORGAN_RANGE)
    ripple = ORGAN_RIPPLE * np.cos(2 * np.pi * local[..., 0] / (2 * axes[0]))
    vol = np.where(organ, organ_level + ripple, vol)
    labels[organ] = 1
    params["organ"] = {"center": center.tolist(), "axes": axes.tolist(), "level": float(organ_level)}

    if n_labels >= 2:
        ax = rng.integers(0, 3)
        p0 = rng.uniform(0.2, 0.8, size=3)
        p2 = rng.uniform(0.2, 0.8, size=3)
        p0[ax], p2[ax] = 0.0, 1.0
        p1 = rng.uniform(0.2, 0.8, size=3)
        radius = rng.uniform(0.07, 0.1)
        tube = _bezier_distance(pts, p0, p1, p2) <= radius
        level = rng.uniform(*VESSEL_RANGE)
        vol = np.where(tube, level, vol)
        labels[tube] = 2
        params["vessel"] = {
            "p0": p0.tolist(), "p1": p1.tolist(), "p2": p2.tolist(),
            "radius": float(radius), "level": float(level),
        }

    noise = np.clip(rng.normal(0.0, NOISE_STD, size=geometry), -NOISE_CLIP, NOISE_CLIP)
    vol = np.clip(vol + noise, -1.0, 1.0)
    return vol, labels, params


def generate(seed: int, geometry=(32, 32, 32), n_labels: int = 2) -> Phantom:
    """Deterministic phantom; redraws from the same stream until every label covers >= 1%."""
    geometry = tuple(int(g) for g in geometry)
    if len(geometry) != 3 or min(geometry) < MIN_EXTENT:
        raise ConfigError(f"phantom geometry {geometry} needs three extents >= {MIN_EXTENT}")
    if n_labels not in (1, 2):
        raise ConfigError(f"n_labels must be 1 or 2, got {n_labels}")
    rng = np.random.default_rng(seed)
    total = float(np.prod(geometry))
    for _ in range(100):
        vol, labels, params = _draw(rng, geometry, n_labels)
        if all((labels == l).sum() / total >= MIN_FRACTION for l in range(1, n_labels + 1)):
            break
    else:  # pragma: no cover - bounds make this unreachable for extents >= 16
        raise ContractError(f"could not place all structures for seed {seed}")
    mask = np.stack([(labels == l) for l in range(n_labels + 1)]).astype(np.float64)
    return Phantom(volume=vol[None].astype(np.float64), mask=mask, seed=int(seed), params=params)


def split_indices(n: int) -> dict[str, list[int]]:
    """0.75 / 0.05 / 0.20 train / val / test split by index."""
    n_train = int(round(0.75 * n))
    n_val = int(round(0.05 * n))
    return {
        "train": list(range(n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n)),
    }


def phantom_seeds(seed: int, n: int) -> list[int]:
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.choice(2**31 - 1, size=n, replace=False)]


def dataset(seed: int, n: int, geometry=(32, 32, 32), n_labels: int = 2) -> list[Phantom]:
    if n < 1:
        raise ContractError("dataset size must be >= 1")
    return [generate(s, geometry, n_labels) for s in phantom_seeds(seed, n)]


def predict_mask(volume: np.ndarray, n_labels: int = 2, largest_component: bool = True) -> np.ndarray:
    """Threshold-based label prediction, optionally keeping the largest component per label.

    Returns an integer label volume ``(D, H, W)``.
    """
    from scipy import ndimage

    v = np.asarray(volume)
    if v.ndim == 4:
        v = v[0]
    out = np.zeros(v.shape, dtype=np.int64)
    for label in range(1, n_labels + 1):
        lo, hi = THRESHOLDS[label]
        m = (v > lo) & (v <= hi)
        if largest_component and m.any():
            comp, n = ndimage.label(m)
            sizes = ndimage.sum(m, comp, index=np.arange(1, n + 1))
            m = comp == (1 + int(np.argmax(sizes)))
        out[m] = label
    return out
