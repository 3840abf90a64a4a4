"""Run configuration: one file with sections ``data``, ``networks``, ``losses``, ``training``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from modality_forge.losses import LossWeights
from modality_forge.networks import NetConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    finetune_lr: float = 1e-5
    batch_size: int = 16
    translation_epochs: int = 30
    segmentation_epochs: int = 20
    finetune_epochs: int = 10
    steps_per_epoch: int | None = None
    max_steps: int | None = None
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    tau_a: float = 0.1
    tau_c: float = 0.1
    similarity_mode: str = "product"
    contrastive_reduction: str = "mean"
    # content positives share the subject, or the subject and the slice index
    content_positives: str = "subject"
    seed: int = 0
    device: str = "cpu"
    resize_size: int = 64
    crop_size: int = 64
    seg_size: tuple[int, int] = (64, 64)
    intensity_range: tuple[float, float] = (0.0, 1.25)
    K: int = 3
    modalities: list[str] = field(default_factory=lambda: ["T1w", "T2w", "T2sw"])
    slices: str | list[int] = "all"
    dis_steps: int = 1
    prototype_decay: float = 0.99
    seg_baseline: bool = False
    log_every: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        self.seg_size = tuple(self.seg_size)
        self.intensity_range = tuple(self.intensity_range)
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be an even number >= 2 (it holds image pairs)")
        if self.tau_a <= 0 or self.tau_c <= 0:
            raise ConfigError("temperatures must be positive")
        if self.crop_size > self.resize_size:
            raise ConfigError("crop_size cannot exceed resize_size")
        lo, hi = self.intensity_range
        if hi <= lo:
            raise ConfigError("intensity_range must be increasing")
        if self.K != len(self.modalities):
            raise ConfigError("K must equal the number of modality names")
        if self.content_positives not in ("subject", "slice"):
            raise ConfigError("content_positives must be 'subject' or 'slice'")
        if self.dis_steps < 1:
            raise ConfigError("dis_steps must be >= 1")
        if not 0 <= self.prototype_decay < 1:
            raise ConfigError("prototype_decay must be in [0, 1)")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """The full-scale schedule (256 resize, 216 crop, 224x160 segmentation)."""
        base = dict(resize_size=256, crop_size=216, seg_size=(224, 160),
                    translation_epochs=400, segmentation_epochs=100, finetune_epochs=100,
                    K=5, modalities=["T1w", "T2w", "T2sw", "Mag", "QSM"])
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    networks: NetConfig = field(default_factory=NetConfig)
    losses: dict = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"data": dict(self.data), "networks": asdict(self.networks),
                "losses": dict(self.losses), "training": self.training.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"data", "networks", "losses", "training"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        training = dict(doc.get("training") or {})
        losses = dict(doc.get("losses") or {})
        # the losses section may carry weights and temperatures
        for key in ("tau_a", "tau_c", "similarity_mode", "contrastive_reduction"):
            if key in losses:
                training.setdefault(key, losses[key])
        if "weights" in losses:
            training.setdefault("weights", losses["weights"])
        try:
            net = NetConfig.from_dict(dict(doc.get("networks") or {}))
            train = TrainConfig.from_dict(training)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if net.K != train.K:
            raise ConfigError(f"networks.K={net.K} disagrees with training.K={train.K}")
        return cls(dict(doc.get("data") or {}), net, losses, train)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
            if path.suffix in (".yaml", ".yml"):
                import yaml
                doc = yaml.safe_load(text) or {}
            else:
                doc = json.loads(text)
        except Exception as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")
