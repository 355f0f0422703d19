"""Experiment configuration: one JSON document drives every command."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..io_utils import config_hash
from ..quant import QuantScheme
from ..synth.generate import SynthesisConfig

METHODS = ("real", "noise", "per_image", "per_batch", "bns_only", "dgh")

# Desk-scale synthesis protocol shared by the trend experiments.
DESK_SYNTHESIS = {"num_images": 64, "batch_size": 8, "iterations": 100, "lr": 2.0}


@dataclass
class ExperimentConfig:
    name: str = "dgh"
    model: str = "builtin"  # "builtin" or a model-file path
    synthesis: dict = field(default_factory=lambda: dict(DESK_SYNTHESIS))
    schemes: list[str] = field(default_factory=lambda: ["W4A4"])
    quant: dict = field(default_factory=dict)  # threshold_mode / granularity / coverage
    baselines: list[str] = field(default_factory=lambda: ["real", "noise", "per_image", "per_batch", "dgh"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    k_values: list[int] = field(default_factory=lambda: [1, 8, 64])
    output: str = "runs/dgh"
    cache_dir: str | None = None  # reuse generated image sets across commands
    val_size: int | None = None  # None -> the full validation split
    train: dict = field(default_factory=dict)  # TrainConfig overrides for `train` / e2e
    arch: str = "tiny-resnet"
    data: dict = field(default_factory=lambda: {"n_train": 4000, "n_val": 1000, "seed": 0})
    hist: dict = field(default_factory=lambda: {"bins": 40, "sources": ["real", "bns_only", "dgh"]})
    augmse: dict = field(default_factory=lambda: {"passes": 5, "pass_size": 1000})
    embed: dict = field(default_factory=lambda: {"sources": ["real", "dgh", "noise"]})
    source: str | None = None  # calibration source for quantize/evaluate: a method or an image-set path
    params: str | None = None  # QuantParams JSON for evaluate

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        bad = [m for m in self.baselines if m not in METHODS]
        if bad:
            raise ValueError(f"unknown baseline(s) {bad}; choose from {METHODS}")
        if self.model != "builtin" and not Path(self.model).exists() and not self.train:
            raise FileNotFoundError(f"model file {self.model} does not exist")
        for s in self.schemes:
            self.scheme(s)
        self.synthesis_config()
        if self.params is not None and not Path(self.params).exists():
            raise FileNotFoundError(f"quantization parameters {self.params} do not exist")

    def scheme(self, label: str) -> QuantScheme:
        return QuantScheme.parse(label, **self.quant)

    def synthesis_config(self, **overrides) -> SynthesisConfig:
        d = dict(self.synthesis)
        d.update(overrides)
        return SynthesisConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        d = self.to_dict()
        for k in ("output", "cache_dir"):  # where results go does not change them
            d.pop(k, None)
        return config_hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        merged = asdict(cls())
        for k, v in d.items():
            # nested sections merge key by key, except free-form override maps
            if isinstance(merged.get(k), dict) and isinstance(v, dict) and k not in ("quant", "train"):
                v = {**merged[k], **v}
            merged[k] = v
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

