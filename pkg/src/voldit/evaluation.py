"""Metric battery comparing a real volume set with a generated one."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, phantom
from .errors import ContractError


@dataclass
class ReportRow:
    name: str
    value: float | int | str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def line(self) -> str:
        p = ";".join(f"{k}={v}" for k, v in self.params.items())
        v = f"{self.value:.6g}" if isinstance(self.value, float) else str(self.value)
        return f"{self.name}\t{v}\t{p}\t{'' if self.seed is None else self.seed}"


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)
    ksel: metrics.KSelection | None = None
    ms_ssim_values: np.ndarray | None = None
    real_ms_ssim_values: np.ndarray | None = None
    mask_scores: list[dict] = field(default_factory=list)

    def add(self, name, value, seed=None, **params) -> None:
        self.rows.append(ReportRow(name, value, params, seed))

    def get(self, name):
        for r in self.rows:
            if r.name == name:
                return r.value
        raise KeyError(name)

    def to_tsv(self) -> str:
        return "metric\tvalue\tparams\tseed\n" + "".join(r.line() + "\n" for r in self.rows)


def mask_agreement(volume: np.ndarray, mask: np.ndarray, n_labels: int) -> dict:
    """Dice and HD95 per label for one generated volume against its conditioning mask.

    ``mask`` is one-hot ``(n_labels + 1, D, H, W)``.  An empty prediction gets
    the volume diagonal as its HD95, the largest distance the grid admits.
    """
    pred = phantom.predict_mask(volume, n_labels)
    diag = float(np.linalg.norm(pred.shape))
    out = {}
    for label in range(1, n_labels + 1):
        truth = np.asarray(mask[label]) > 0.5
        guess = pred == label
        out[f"dice_{label}"] = metrics.dice(guess, truth)
        out[f"hd95_{label}"] = metrics.hd95(guess, truth) if guess.any() and truth.any() else diag
    out["dice"] = float(np.mean([out[f"dice_{l}"] for l in range(1, n_labels + 1)]))
    out["hd95"] = float(np.mean([out[f"hd95_{l}"] for l in range(1, n_labels + 1)]))
    return out


def evaluate(
    real: list[np.ndarray],
    fake: list[np.ndarray],
    n_fake: int = 100,
    pairs: int = 100,
    threshold: float = 0.95,
    extractor: str = "pooled-moments",
    seed: int = 0,
    masks: list[np.ndarray] | None = None,
    data_range: float = 2.0,
) -> Report:
    """Run k calibration on real/real, then the fidelity, diversity and mask metrics.

    ``masks[i]`` is the condition used for ``fake[i]``.
    """
    if not real or not fake:
        raise ContractError("evaluate needs nonempty real and generated sets")
    if len(fake) < n_fake:
        raise ContractError(f"evaluate expects {n_fake} generated volumes, found {len(fake)}")
    fake = fake[:n_fake]
    rep = Report()
    rep.add("n_real", len(real))
    rep.add("n_fake", len(fake))

    fr = metrics.extract_features(real, extractor, seed=seed)
    ff = metrics.extract_features(fake, extractor, seed=seed, provenance="generated")
    ksel = metrics.select_k(fr, threshold=threshold, seed=seed)
    rep.ksel = ksel
    rep.add("k", ksel.k, seed, threshold=threshold, saturated=str(ksel.saturated).lower(), extractor=extractor)
    k = min(ksel.k, len(fake) - 1, len(real) - 1)
    res = metrics.prdc(fr, ff, k)
    for name, v in res.as_dict().items():
        rep.add(name, v, seed, k=k, extractor=extractor)
    if len(real) >= 2 and len(fake) >= 2:
        rep.add("frechet", metrics.frechet_distance(fr, ff), extractor=extractor)
        fd, axes = metrics.frechet_25d(real, fake, return_axes=True)
        rep.add("frechet_25d", fd, axes=",".join(f"{a:.4g}" for a in axes))

    mean, std, vals = metrics.ms_ssim_pairs(fake, n_pairs=pairs, seed=seed, data_range=data_range)
    rep.ms_ssim_values = vals
    rep.add("ms_ssim_fake", mean, seed, pairs=pairs, std=f"{std:.4g}", data_range=data_range)
    if len(real) >= 2:
        rmean, rstd, rvals = metrics.ms_ssim_pairs(real, n_pairs=pairs, seed=seed, data_range=data_range)
        rep.real_ms_ssim_values = rvals
        rep.add("ms_ssim_real", rmean, seed, pairs=pairs, std=f"{rstd:.4g}", data_range=data_range)

    if masks is not None:
        if len(masks) < len(fake):
            raise ContractError(f"{len(masks)} masks for {len(fake)} generated volumes")
        n_labels = int(np.asarray(masks[0]).shape[0]) - 1
        scores = [mask_agreement(v, m, n_labels) for v, m in zip(fake, masks)]
        rep.mask_scores = scores
        for key in scores[0]:
            arr = np.array([s[key] for s in scores])
            rep.add(f"{key}_median", float(np.median(arr)), n=len(arr))
            rep.add(f"{key}_mean", float(arr.mean()), n=len(arr))
    return rep
