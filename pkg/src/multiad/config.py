"""Pipeline configuration and its JSON document form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lam: float = 0.1
    dropout_p: float = 0.3
    leaky_slope: float = 0.2
    sigma_g: float = 4.0
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    input_extent: int = 64
    se_enabled: bool = True
    discriminator_enabled: bool = True
    mff_enabled: bool = True
    disc_width_factor: float = 1.0
    student_bn_mode: str = "train"
    teacher_mode: str = "random"
    teacher_bn_calibration: bool = True
    pretext_epochs: int = 5
    train_dir: str | None = None
    eval_dir: str | None = None

    def __post_init__(self) -> None:
        # the top-level SE switch is the single source of truth for the backbone flag
        self.backbone.se_enabled = self.se_enabled
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.input_extent < 4 or self.input_extent % 4:
            raise ConfigError("input_extent must be a positive multiple of 4")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        if self.sigma_g <= 0 or self.lr <= 0 or self.disc_width_factor <= 0:
            raise ConfigError("sigma_g, lr and disc_width_factor must be positive")
        if self.student_bn_mode not in ("train", "eval"):
            raise ConfigError("student_bn_mode must be 'train' or 'eval'")
        if self.teacher_mode not in ("random", "pretext"):
            raise ConfigError("teacher_mode must be 'random' or 'pretext'")

    @property
    def feature_extent(self) -> int:
        return self.input_extent // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config document must be a mapping")
        d = dict(d)
        _reject_unknown(d, {f.name for f in fields(cls)}, "config")
        bb = d.pop("backbone", {}) or {}
        if not isinstance(bb, dict):
            raise ConfigError("backbone must be a mapping")
        _reject_unknown(bb, {f.name for f in fields(BackboneConfig)}, "backbone")
        bb = dict(bb)
        top_se = d.get("se_enabled", True)
        if bb.get("se_enabled", top_se) != top_se:
            raise ConfigError("backbone.se_enabled disagrees with se_enabled")
        bb["se_enabled"] = top_se
        try:
            return cls(backbone=BackboneConfig(**bb), **d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text())

    def replace(self, **changes) -> "PipelineConfig":
        d = self.to_dict()
        bb_changes = changes.pop("backbone", None)
        d.update(changes)
        if bb_changes:
            d["backbone"].update(bb_changes)
        if "se_enabled" in changes:
            d["backbone"]["se_enabled"] = changes["se_enabled"]
        return PipelineConfig.from_dict(d)


def _reject_unknown(d: dict, known: set[str], where: str) -> None:
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")
