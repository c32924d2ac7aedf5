"""Run configuration stored as INI text with one section per pipeline stage."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .codec import LatentSpec
from .dit import MODEL_SIZES, DiTConfig, make_config
from .errors import ConfigError, DimensionError


@dataclass
class ModelSection:
    size: str = "XS"
    patch: int = 2
    seed: int = 0


@dataclass
class CodecSection:
    levels: int = 3


@dataclass
class ScheduleSection:
    T: int = 300
    s: float = 0.008


@dataclass
class TrainSection:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 100
    huber_delta: float = 1.0
    subset: str = "train"  # train | all


@dataclass
class DataSection:
    n: int = 100
    geometry: tuple[int, int, int] = (32, 32, 32)
    n_labels: int = 2
    seed: int = 0


@dataclass
class AdapterSection:
    mode: str = "learned"  # learned | fixed
    pi: float = 1.0
    layers: str = "all"
    steps: int = 500
    lr: float = 1e-4
    seed: int = 0


@dataclass
class SampleSection:
    n: int = 100
    mode: str = "deterministic"
    seed: int = 0
    batch: int = 25


@dataclass
class EvaluateSection:
    n_fake: int = 100
    pairs: int = 100
    threshold: float = 0.95
    extractor: str = "pooled-moments"
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs"


_SECTIONS = {
    "model": ModelSection,
    "codec": CodecSection,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "data": DataSection,
    "adapter": AdapterSection,
    "sample": SampleSection,
    "evaluate": EvaluateSection,
    "output": OutputSection,
}


def _parse(value: str, default):
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace("x", ",").split(","))
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    codec: CodecSection = field(default_factory=CodecSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    sample: SampleSection = field(default_factory=SampleSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for name in cp.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            sec = getattr(cfg, name)
            known = {f.name: f for f in fields(sec)}
            for key, raw in cp[name].items():
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                try:
                    setattr(sec, key, _parse(raw, getattr(sec, key)))
                except ValueError as exc:
                    raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for name in _SECTIONS:
            sec = getattr(self, name)
            lines.append(f"[{name}]")
            lines += [f"{f.name} = {_format(getattr(sec, f.name))}" for f in fields(sec)]
            lines.append("")
        return "\n".join(lines)

    # derived objects -------------------------------------------------------

    def latent_spec(self) -> LatentSpec:
        return LatentSpec(levels=self.codec.levels, input_channels=1)

    def dit_config(self) -> DiTConfig:
        spec = self.latent_spec()
        try:
            extents = spec.latent_extents(self.data.geometry)
        except DimensionError as exc:
            raise ConfigError(str(exc)) from exc
        return make_config(self.model.size, self.model.patch, spec.latent_channels, extents)

    def injection_layers(self, depth: int) -> tuple[int, ...]:
        raw = self.adapter.layers.strip().lower()
        if raw == "all":
            return tuple(range(1, depth + 1))
        try:
            layers = tuple(int(v) for v in raw.split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"bad injection layer list {self.adapter.layers!r}") from exc
        if not layers or any(l < 1 or l > depth for l in layers):
            raise ConfigError(f"injection layers {layers} outside 1..{depth}")
        return layers

    def validate(self) -> DiTConfig:
        """Check every cross-field constraint; returns the backbone config."""
        if self.model.size not in MODEL_SIZES:
            raise ConfigError(f"unknown model size {self.model.size!r}")
        if self.model.patch not in (1, 2, 4):
            raise ConfigError(f"patch must be 1, 2 or 4, got {self.model.patch}")
        if len(self.data.geometry) != 3:
            raise ConfigError(f"geometry needs three extents, got {self.data.geometry}")
        if self.schedule.T < 1 or self.schedule.s <= 0:
            raise ConfigError("schedule needs T >= 1 and s > 0")
        if self.train.steps < 1 or self.train.batch < 1 or self.train.lr <= 0:
            raise ConfigError("train steps, batch and lr must be positive")
        if self.train.subset not in ("train", "all"):
            raise ConfigError(f"train subset must be 'train' or 'all', got {self.train.subset!r}")
        if self.adapter.mode not in ("learned", "fixed"):
            raise ConfigError(f"adapter mode must be 'learned' or 'fixed', got {self.adapter.mode!r}")
        if self.adapter.pi < 0:
            raise ConfigError(f"adapter pi must be >= 0, got {self.adapter.pi}")
        if self.sample.mode not in ("ancestral", "deterministic"):
            raise ConfigError(f"sample mode must be 'ancestral' or 'deterministic', got {self.sample.mode!r}")
        if not 0 <= self.evaluate.threshold < 1:
            raise ConfigError("evaluate threshold must lie in [0, 1)")
        cfg = self.dit_config()
        self.injection_layers(cfg.depth)
        return cfg
