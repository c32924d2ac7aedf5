"""Fidelity, diversity and mask-agreement metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ContractError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class FeatureSet:
    features: np.ndarray
    provenance: str = "real"
    extractor: str = "custom"

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if not np.all(np.isfinite(self.features)):
            raise ContractError("feature matrix contains non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class PRDCResult:
    precision: float
    recall: float
    density: float
    coverage: float
    k: int

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "density": self.density, "coverage": self.coverage}


@dataclass
class KSelection:
    k: int
    threshold: float
    saturated: bool
    scores: dict[int, PRDCResult] = field(default_factory=dict)


def _feats(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.atleast_2d(np.asarray(x, dtype=np.float64))


# ----------------------------------------------------------------------------
# Frechet distance
# ----------------------------------------------------------------------------

def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu1, cov1, mu2, cov2, eps: float = 1e-6) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ContractError(f"feature dimensions differ: {mu1.shape} vs {mu2.shape}")
    dim = cov1.shape[0]
    if min(np.linalg.eigvalsh(cov1).min(), np.linalg.eigvalsh(cov2).min()) < eps:
        cov1 = cov1 + eps * np.eye(dim)
        cov2 = cov2 + eps * np.eye(dim)
    s1 = _sqrt_psd(cov1)
    inner = s1 @ cov2 @ s1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0.0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt, 0.0))


def frechet_distance(real, fake, eps: float = 1e-6) -> float:
    """Distance between Gaussian fits of two feature sets."""
    a, b = _feats(real), _feats(fake)
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ContractError("Frechet statistics need at least two samples per set")
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False), eps)


def slice_features(img: np.ndarray) -> np.ndarray:
    """2-D pooled moments: per-quadrant mean, variance and gradient magnitude."""
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape) >= 2:
        g = np.hypot(*np.gradient(img))
    else:
        g = np.zeros_like(img)
    feats = []
    rows = np.array_split(np.arange(img.shape[0]), min(2, img.shape[0]))
    cols = np.array_split(np.arange(img.shape[1]), min(2, img.shape[1]))
    for r in rows:
        for c in cols:
            blk, gb = img[np.ix_(r, c)], g[np.ix_(r, c)]
            feats += [blk.mean(), blk.var(), gb.mean()]
    feats += [0.0] * (12 - len(feats))
    return np.array(feats)


def _as_volume(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v[0] if v.ndim == 4 else v


def frechet_25d(
    real_volumes: Sequence[np.ndarray],
    fake_volumes: Sequence[np.ndarray],
    extractor: Callable[[np.ndarray], np.ndarray] = slice_features,
    return_axes: bool = False,
):
    """Mean over the three axes of the Frechet distance between per-slice features."""
    real = [_as_volume(v) for v in real_volumes]
    fake = [_as_volume(v) for v in fake_volumes]
    if not real or not fake:
        raise ContractError("frechet_25d needs nonempty volume sets")
    if any(v.shape != real[0].shape for v in real + fake):
        raise ContractError("all volumes must share one geometry")
    per_axis = []
    for axis in range(3):
        fr = np.array([extractor(np.take(v, i, axis=axis)) for v in real for i in range(v.shape[axis])])
        ff = np.array([extractor(np.take(v, i, axis=axis)) for v in fake for i in range(v.shape[axis])])
        per_axis.append(frechet_distance(fr, ff))
    mean = float(np.mean(per_axis))
    return (mean, per_axis) if return_axes else mean


# ----------------------------------------------------------------------------
# precision / recall / density / coverage
# ----------------------------------------------------------------------------

def pairwise_distances(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(0, a.shape[0], chunk):
        diff = a[i : i + chunk, None, :] - b[None, :, :]
        out[i : i + chunk] = np.sqrt((diff * diff).sum(-1))
    return out


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour within the same set (self excluded)."""
    d = pairwise_distances(x, x)
    return np.sort(d, axis=1)[:, k]


def prdc(real, fake, k: int = 5) -> PRDCResult:
    r, f = _feats(real), _feats(fake)
    if r.shape[1] != f.shape[1]:
        raise ContractError(f"feature dimensions differ: {r.shape[1]} vs {f.shape[1]}")
    if k < 1 or k >= min(len(r), len(f)):
        raise ContractError(f"k={k} must satisfy 1 <= k < min(n_real, n_fake) = {min(len(r), len(f))}")
    rr = knn_radii(r, k)
    rf = knn_radii(f, k)
    d = pairwise_distances(r, f)  # (n_real, n_fake)
    inside_real = d < rr[:, None]
    precision = inside_real.any(axis=0).mean()
    recall = (d < rf[None, :]).any(axis=1).mean()
    density = inside_real.sum() / (k * len(f))
    coverage = (d.min(axis=1) < rr).mean()
    return PRDCResult(float(precision), float(recall), float(density), float(coverage), k)


def select_k(real, threshold: float = 0.95, seed: int = 0, k_max: int | None = None) -> KSelection:
    """Smallest k whose real-vs-real PRDC scores all exceed ``threshold``.

    The real set is split into two seeded halves.  If no admissible k qualifies,
    the largest tried k is returned with ``saturated=True``.
    """
    if not 0 <= threshold < 1:
        raise ContractError(f"threshold must lie in [0, 1), got {threshold}")
    x = _feats(real)
    if len(x) < 4:
        raise ContractError("select_k needs at least four real samples")
    perm = np.random.default_rng(seed).permutation(len(x))
    half = len(x) // 2
    a, b = x[perm[:half]], x[perm[half : 2 * half]]
    upper = half - 1 if k_max is None else min(k_max, half - 1)
    scores: dict[int, PRDCResult] = {}
    for k in range(1, upper + 1):
        res = prdc(a, b, k)
        scores[k] = res
        if min(res.precision, res.recall, res.density, res.coverage) > threshold:
            return KSelection(k, threshold, False, scores)
    return KSelection(upper, threshold, True, scores)


# ----------------------------------------------------------------------------
# MS-SSIM
# ----------------------------------------------------------------------------

def _ssim_terms(x, y, c1, c2, sigma):
    def filt(v):
        return ndimage.gaussian_filter(v, sigma, truncate=3.5, mode="nearest")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float((lum * cs).mean()), float(cs.mean())


def _pool2(v: np.ndarray) -> np.ndarray:
    d, h, w = (s - s % 2 for s in v.shape)
    v = v[:d, :h, :w]
    return v.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def ms_ssim(a, b, scales: int = 3, data_range: float | None = None, sigma: float = 1.5) -> float:
    """Multi-scale SSIM between two volumes (Gaussian window of width 11).

    Filtering pads by edge replication, so the coarsest scale only needs 4
    voxels per axis.  Negative per-scale terms are clamped at zero.
    """
    x, y = _as_volume(a), _as_volume(b)
    if x.shape != y.shape:
        raise ContractError(f"volume shapes differ: {x.shape} vs {y.shape}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ContractError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}")
    if min(x.shape) // 2 ** (scales - 1) < 4:
        raise ContractError(f"volume {x.shape} too small for {scales} scales")
    if data_range is None:
        data_range = max(x.max(), y.max()) - min(x.min(), y.min())
        data_range = data_range if data_range > 0 else 1.0
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    w = np.array(MS_SSIM_WEIGHTS[:scales])
    w = w / w.sum()
    out = 1.0
    for j in range(scales):
        ssim_j, cs_j = _ssim_terms(x, y, c1, c2, sigma)
        term = ssim_j if j == scales - 1 else cs_j
        out *= max(term, 0.0) ** w[j]
        if j < scales - 1:
            x, y = _pool2(x), _pool2(y)
    return float(out)


def ms_ssim_pairs(volumes, n_pairs: int = 100, seed: int = 0, scales: int = 3, data_range=None):
    """MS-SSIM over random distinct pairs; returns ``(mean, std, values)``."""
    vols = list(volumes)
    if len(vols) < 2:
        raise ContractError("need at least two volumes for pairwise MS-SSIM")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_pairs):
        i, j = rng.choice(len(vols), size=2, replace=False)
        vals.append(ms_ssim(vols[i], vols[j], scales=scales, data_range=data_range))
    vals = np.array(vals)
    return float(vals.mean()), float(vals.std()), vals


# ----------------------------------------------------------------------------
# mask agreement
# ----------------------------------------------------------------------------

def dice(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


_SIX = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask (volume border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled symmetric surface-to-surface distances."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ContractError("empty mask: hd95 is undefined")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface_voxels(a)) * sp
    pb = np.argwhere(surface_voxels(b)) * sp
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    return float(np.percentile(np.concatenate([dab, dba]), 95))


# ----------------------------------------------------------------------------
# feature extractors
# ----------------------------------------------------------------------------

def _pooled_moments(v: np.ndarray) -> np.ndarray:
    g = np.sqrt(sum(gi**2 for gi in np.gradient(v)))
    feats = [v.mean(), v.var(), g.mean()]
    for iz in np.array_split(np.arange(v.shape[0]), 2):
        for iy in np.array_split(np.arange(v.shape[1]), 2):
            for ix in np.array_split(np.arange(v.shape[2]), 2):
                blk = v[np.ix_(iz, iy, ix)]
                feats += [blk.mean(), blk.var(), g[np.ix_(iz, iy, ix)].mean()]
    return np.array(feats)


def _block_mean(v: np.ndarray, target: int = 8) -> np.ndarray:
    f = [max(s // target, 1) for s in v.shape]
    d, h, w = (s // fi * fi for s, fi in zip(v.shape, f))
    v = v[:d, :h, :w]
    return v.reshape(d // f[0], f[0], h // f[1], f[1], w // f[2], f[2]).mean(axis=(1, 3, 5))


def extract_features(volumes, extractor: str = "pooled-moments", feat_dim: int = 64, seed: int = 0,
                     provenance: str = "real") -> FeatureSet:
    vols = [_as_volume(v) for v in volumes]
    if not vols:
        raise ContractError("extract_features needs at least one volume")
    if extractor == "pooled-moments":
        feats = np.stack([_pooled_moments(v) for v in vols])
    elif extractor == "random-projection":
        pooled = np.stack([_block_mean(v).reshape(-1) for v in vols])
        proj = np.random.default_rng(seed).standard_normal((pooled.shape[1], feat_dim)) / np.sqrt(pooled.shape[1])
        feats = pooled @ proj
    else:
        raise ContractError(f"unknown extractor {extractor!r}")
    return FeatureSet(feats, provenance=provenance, extractor=extractor)
