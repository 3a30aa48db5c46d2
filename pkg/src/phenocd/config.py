"""Run configuration models.

Every field has a default so an empty JSON object is a valid config. Unknown
keys are rejected at every nesting level.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneConfig(_Strict):
    height: int = Field(64, ge=16)
    width: int = Field(64, ge=16)
    num_classes: int = Field(4, ge=2, le=255)
    num_stages: int = Field(4, ge=2, le=255)
    blob_count: tuple[int, int] = (4, 8)
    change_fraction: float = Field(0.15, ge=0.0, le=0.5)
    pseudo_change_fraction: float = Field(0.3, ge=0.0, le=1.0)
    noise_sigma: float = Field(0.03, ge=0.0, le=0.2)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_blobs(self) -> "SceneConfig":
        lo, hi = self.blob_count
        if lo < 1 or hi < lo:
            raise ValueError(f"blob_count must satisfy 1 <= min <= max, got {self.blob_count}")
        return self


class DetectorConfig(_Strict):
    height: int = Field(64, ge=16)
    width: int = Field(64, ge=16)
    channels: int = Field(32, ge=4)
    reduction: int = Field(4, ge=1)
    spb_scales: tuple[int, ...] = (1, 2, 4)
    head_hidden: int = Field(32, ge=1)
    num_semantic_classes: int = Field(4, ge=2)
    fusion: Literal["dam", "concat", "subtract"] = "dam"
    use_spb: bool = True

    @model_validator(mode="after")
    def _check(self) -> "DetectorConfig":
        if self.channels % self.reduction:
            raise ValueError(f"channels ({self.channels}) must be divisible by reduction ({self.reduction})")
        if self.height % 4 or self.width % 4:
            raise ValueError(f"input {self.height}x{self.width} must be divisible by 4")
        if not self.spb_scales or min(self.spb_scales) < 1:
            raise ValueError("spb_scales must be a non-empty set of positive sizes")
        limit = min(self.height, self.width) // 4
        if max(self.spb_scales) > limit:
            raise ValueError(f"spb_scales {self.spb_scales} exceed feature size {limit}")
        if len(self.spb_scales) > self.channels:
            raise ValueError("more pyramid scales than channels")
        return self


class LossWeights(_Strict):
    w_cd: float = Field(1.0, ge=0)
    w_sem: float = Field(1.0, ge=0)
    w_clem: float = Field(0.2, ge=0)
    w_plm: float = Field(0.2, ge=0)
    lambda_pp: float = Field(1.0, ge=0)
    lambda_rr: float = Field(1.0, ge=0)
    lambda_pr: float = Field(1.0, ge=0)
    tau: float = Field(0.1, gt=0)
    clem_form: Literal["pairwise", "mix"] = "pairwise"
    embed_dim: int = Field(32, ge=2)
    anchors_per_class: int = Field(16, ge=1)
    num_negatives: int = Field(64, ge=1)
    positive_candidates: int = Field(16, ge=1)
    min_region_pixels: int = Field(8, ge=1)
    # True: PLM negatives are other-class pixels only (strict table reading).
    plm_strict_negatives: bool = False
    plm_centroid_negatives: bool = False

    @model_validator(mode="after")
    def _check(self) -> "LossWeights":
        if max(self.w_cd, self.w_sem, self.w_clem, self.w_plm) <= 0:
            raise ValueError("at least one loss weight must be positive")
        return self


class StageSchedule(_Strict):
    epochs_stage1: int = Field(60, ge=1)
    epochs_stage3: int = Field(60, ge=1)
    batch_size: int = Field(4, ge=2)
    lr: float = Field(0.0025, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    val_period: int = Field(5, ge=1)
    clusters_per_class: int = Field(4, ge=1)
    reservoir_cap: int = Field(10_000, ge=1)
    resume_stage3: bool = True
    threshold: float = Field(0.5, gt=0, lt=1)


class RunConfig(_Strict):
    name: str = "run"
    seed: int = Field(0, ge=0, lt=2**63)
    scene: SceneConfig = SceneConfig()
    detector: DetectorConfig = DetectorConfig()
    loss: LossWeights = LossWeights()
    schedule: StageSchedule = StageSchedule()

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.detector.num_semantic_classes != self.scene.num_classes:
            raise ValueError(
                "detector.num_semantic_classes must equal scene.num_classes "
                f"({self.detector.num_semantic_classes} != {self.scene.num_classes})"
            )
        return self

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _raise(exc: pydantic.ValidationError) -> ConfigError:
    first = exc.errors()[0]
    field = ".".join(str(p) for p in first["loc"]) or "<root>"
    return ConfigError(f"invalid config field '{field}': {first['msg']}")


def build(model: type[_Strict], data: dict[str, Any] | None = None, **overrides):
    """Validate ``data`` into ``model``, turning pydantic errors into ConfigError."""
    payload = dict(data or {})
    payload.update(overrides)
    try:
        return model.model_validate(payload)
    except pydantic.ValidationError as exc:
        raise _raise(exc) from None


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return build(RunConfig, data)
