"""Experiment configuration: a YAML document validated by pydantic models.

``configs/config.schema.json`` is generated from :class:`ExperimentConfig`
(``python -m chipneck.config``) and documents every field.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from chipneck.errors import ConfigError
from chipneck.traffic import CONTIGUOUS, EXPLICIT
from chipneck.zoo import FULL_INPUT, Variant

U64_MAX = 2**64 - 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    variant: str = Field("Tiny", description="R18, R34, R50, R101, R152 or Tiny")
    classes: Optional[int] = Field(None, ge=2, description="classifier width; defaults to the dataset's class count")
    input_hw: Optional[int] = Field(None, ge=1, description="square input side; 224 for full variants, dataset size for Tiny")
    apply_ratio_to_blocks: bool = Field(
        True, description="also divide block middle widths by r (false: r only at chip boundaries)")

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v):
        try:
            return Variant.parse(v).value
        except ConfigError as exc:
            raise ValueError(str(exc)) from None


class PartitionSection(_Section):
    n_chips: int = Field(2, ge=1)
    strategy: Literal["contiguous-equal-layers", "explicit-map"] = CONTIGUOUS
    assignment: Optional[dict[str, int]] = Field(None, description="node name -> chip, for explicit-map")

    @model_validator(mode="after")
    def _assignment_matches_strategy(self):
        if self.strategy == EXPLICIT and not self.assignment:
            raise ValueError("assignment is required when strategy is explicit-map")
        if self.strategy != EXPLICIT and self.assignment:
            raise ValueError("assignment is only used with strategy explicit-map")
        return self


class LinkSection(_Section):
    alpha: float = Field(1e-6, ge=0, allow_inf_nan=False, description="per-transfer latency in seconds")
    beta: float = Field(1e9, gt=0, allow_inf_nan=False, description="bandwidth in bytes per second")


class DatasetSection(_Section):
    source: Literal["synthetic", "cifar100"] = "synthetic"
    path: Optional[Path] = Field(None, description="cifar100: a .bin file or a directory with train.bin/test.bin")
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(1000, ge=1)
    classes: int = Field(20, ge=2)
    hw: int = Field(8, ge=4, description="synthetic image side")
    noise: float = Field(0.3, ge=0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _path_exists(self):
        if self.source == "cifar100":
            if self.path is None:
                raise ValueError("path is required for source cifar100")
            if not self.path.exists():
                raise ValueError(f"path {self.path} does not exist")
        return self


class TrainingSection(_Section):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.05, gt=0, allow_inf_nan=False)
    momentum: float = Field(0.9, ge=0, lt=1)


class ProfileSection(_Section):
    measure: bool = Field(True, description="execute the graph to record activations; false uses shape inference")


class ExperimentConfig(_Section):
    seed: int = Field(..., ge=0, le=U64_MAX, description="master seed; every random stream derives from it")
    ratios: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 32], min_length=1)
    precision: Literal["single", "double"] = "single"
    model: ModelSection = ModelSection()
    partition: PartitionSection = PartitionSection()
    link: LinkSection = LinkSection()
    dataset: DatasetSection = DatasetSection()
    training: TrainingSection = TrainingSection()
    profile: ProfileSection = ProfileSection()
    output_dir: Path = Path("out")

    @field_validator("ratios")
    @classmethod
    def _ratios_positive(cls, v):
        bad = [r for r in v if r < 1]
        if bad:
            raise ValueError(f"every ratio must be >= 1, got {bad}")
        return sorted(set(v))

    @property
    def is_tiny(self) -> bool:
        return self.model.variant == Variant.TINY.value

    @property
    def classes(self) -> int:
        if self.model.classes is not None:
            return self.model.classes
        return self.dataset.classes if self.dataset.source == "synthetic" else 100

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        if self.model.input_hw is not None:
            hw = self.model.input_hw
        elif self.is_tiny:
            hw = self.dataset.hw if self.dataset.source == "synthetic" else 32
        else:
            hw = FULL_INPUT[2]
        return (1, 3, hw, hw)


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        field = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        lines.append(f"{field}: {msg}")
    return "invalid config:\n  " + "\n  ".join(lines)


def parse_config(doc: dict, **overrides) -> ExperimentConfig:
    """Validate a config mapping; non-None ``overrides`` replace top-level keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping of sections")
    doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(doc or {}, **overrides)


def schema_json() -> str:
    return json.dumps(ExperimentConfig.model_json_schema(), indent=2, sort_keys=True) + "\n"


if __name__ == "__main__":
    sys.stdout.write(schema_json())
