"""Experiment configuration: one JSON document drives the whole pipeline.

A persisted config plus its seeds reproduces the experiment exactly.
Overrides use dotted paths (``train.lr0=0.001``) so single parameters can
be changed from the command line without editing the file.
"""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PathSettings(StrictModel):
    workdir: str = "experiment"
    cohort: str | None = None

    def workdir_path(self) -> Path:
        return Path(self.workdir)

    def cohort_path(self) -> Path:
        return Path(self.cohort) if self.cohort else self.workdir_path() / "cohort"


class PhantomSettings(StrictModel):
    n_cases: int = Field(default=46, ge=3)
    volume_shape: tuple[int, int, int] = (48, 96, 96)
    spacing: tuple[float, float, float] = (3.0, 1.5625, 1.5625)
    n_annotation_groups: int = Field(default=3, ge=1)
    hard_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    seed: int = 20

    @field_validator("volume_shape")
    @classmethod
    def _shape_big_enough(cls, v):
        if any(d < 32 for d in v):
            raise ValueError(f"volume_shape dims must be >= 32, got {v}")
        return v

    @field_validator("spacing")
    @classmethod
    def _spacing_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"spacing must be positive, got {v}")
        return v


class SplitSettings(StrictModel):
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 7

    @field_validator("fractions")
    @classmethod
    def _fractions_valid(cls, v):
        if any(f <= 0 for f in v):
            raise ValueError(f"fractions must be positive, got {v}")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got sum {sum(v)}")
        return v


class AugmentSettings(StrictModel):
    enabled: bool = True
    prob: float = Field(default=0.15, ge=0.0, le=1.0)
    mirror_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    scale_range: tuple[float, float] = (0.85, 1.15)
    rotate_max_deg: float = 15.0
    gamma_range: tuple[float, float] = (0.7, 1.5)
    contrast_range: tuple[float, float] = (0.75, 1.25)
    brightness_limit: float = 0.2
    noise_sigma_max: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.5, 1.0)


class PreprocessSettings(StrictModel):
    target_spacing: tuple[float, float, float] = (3.0, 1.5625, 1.5625)
    patch_size: tuple[int, int, int] = (96, 160, 160)
    foreground_bias: float = Field(default=0.5, ge=0.0, le=1.0)
    augment: AugmentSettings = AugmentSettings()

    @field_validator("target_spacing")
    @classmethod
    def _spacing_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"target_spacing must be positive, got {v}")
        return v

    @field_validator("patch_size")
    @classmethod
    def _patch_divisible(cls, v):
        if any(d <= 0 or d % 16 != 0 for d in v):
            raise ValueError(f"patch dims must be positive multiples of 16, got {v}")
        return v


class NetworkSettings(StrictModel):
    in_channels: int = Field(default=1, ge=1)
    base_channels: int = Field(default=24, ge=1)
    levels: int = Field(default=4, ge=1)
    num_classes: int = Field(default=4, ge=2)
    seed: int = 40


class TrainSettings(StrictModel):
    epochs: int = Field(default=100, ge=1)
    samples_per_epoch: int = Field(default=400, ge=1)
    batch_size: int = Field(default=2, ge=1)
    lr0: float = Field(default=0.005, gt=0.0)
    plateau_factor: float = Field(default=0.3, gt=0.0, lt=1.0)
    plateau_patience: int = Field(default=10, ge=1)
    improvement_threshold: float = Field(default=1e-6, ge=0.0)
    seed: int = 50

    @model_validator(mode="after")
    def _divisible(self):
        if self.samples_per_epoch % self.batch_size != 0:
            raise ValueError(
                f"samples_per_epoch {self.samples_per_epoch} not divisible by "
                f"batch_size {self.batch_size}"
            )
        return self


class SelectSettings(StrictModel):
    n_folds: int = Field(default=5, ge=2)
    grid_size: int = Field(default=100, ge=2)
    lambda_min_ratio: float = Field(default=1e-3, gt=0.0, lt=1.0)
    seed: int = 60


class EvalSettings(StrictModel):
    tolerance_mm: dict[str, float] = Field(
        default_factory=lambda: {"kidney_and_masses": 1.0, "masses": 1.0, "tumor": 1.0}
    )

    @field_validator("tolerance_mm")
    @classmethod
    def _tolerances_valid(cls, v):
        allowed = {"kidney_and_masses", "masses", "tumor"}
        unknown = set(v) - allowed
        if unknown:
            raise ValueError(f"unknown classes in tolerance_mm: {sorted(unknown)}")
        if any(t < 0 for t in v.values()):
            raise ValueError("tolerances must be nonnegative")
        return v


class StatsSettings(StrictModel):
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)


class ExperimentConfig(StrictModel):
    paths: PathSettings = PathSettings()
    phantom: PhantomSettings = PhantomSettings()
    split: SplitSettings = SplitSettings()
    preprocess: PreprocessSettings = PreprocessSettings()
    network: NetworkSettings = NetworkSettings()
    train: TrainSettings = TrainSettings()
    select: SelectSettings = SelectSettings()
    eval: EvalSettings = EvalSettings()
    stats: StatsSettings = StatsSettings()

    @model_validator(mode="after")
    def _patch_matches_network(self):
        divisor = 2**self.network.levels
        if any(d % divisor != 0 for d in self.preprocess.patch_size):
            raise ValueError(
                f"patch_size {self.preprocess.patch_size} must be divisible by "
                f"2^levels = {divisor}"
            )
        return self

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.model_dump(mode="json"), indent=2))


def apply_overrides(data: dict, overrides: dict[str, str]) -> dict:
    """Set dotted-path keys in a nested dict; values parse as JSON when possible."""
    for dotted, raw in overrides.items():
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} walks through a non-dict value")
        try:
            value = json.loads(raw) if isinstance(raw, str) else raw
        except json.JSONDecodeError:
            value = raw
        node[keys[-1]] = value
    return data


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    data: dict | None = None,
) -> ExperimentConfig:
    """Build a validated config from defaults, a JSON file, or an inline dict."""
    if path is not None and data is not None:
        raise ConfigError("pass either a config file or inline data, not both")
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if data is None:
        data = {}
    if overrides:
        data = apply_overrides(data, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
