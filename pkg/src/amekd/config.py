"""Experiment configuration schema shared by ``run`` and ``validate``."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .distill import TrainConfig
from .synthgen import ClassGeometry

OUTPUT_ROOT_ENV = "AMEKD_OUTPUT_ROOT"

Recipe = Literal["base-to-new", "collapse", "angle-study", "gap-sweep", "shot-sweep"]

PAPER_DEFAULTS = {
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.omega",
    "seeds",
}


class GeometrySchema(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(4, ge=2)
    embed_dim: int = Field(16, ge=2)
    prototype_separation: float = Field(1.0, ge=0.0, le=3.141592653589793)
    noise_scale: float = Field(0.3, ge=0.0)
    boundary_fraction: float = Field(0.25, ge=0.0, le=1.0)

    def build(self) -> ClassGeometry:
        return ClassGeometry(**self.model_dump())


class TrainSchema(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, gt=0)
    batch_size: int = Field(8, gt=0)
    learning_rate: float = Field(0.005, ge=0.0)
    omega: float = Field(50.0, ge=0.0)
    kd_temperature: float = Field(1.0, gt=0.0)
    kd_weight: float = Field(1.0, ge=0.0)
    manifold_dim: int = Field(8, gt=0)
    kernel_size: int = Field(3, gt=0)
    logit_temperature: float = Field(0.07, gt=0.0)
    student_init_noise: float = Field(1.0, ge=0.0)
    init_scale: float = Field(0.1, ge=0.0)
    activation: Literal["tanh", "identity"] = "tanh"
    freeze_projections: bool = False
    identity_projections: bool = False

    @model_validator(mode="after")
    def _odd_kernel(self):
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        return self

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    recipe: Recipe
    geometry: GeometrySchema = Field(default_factory=GeometrySchema)
    train: TrainSchema = Field(default_factory=TrainSchema)
    shots: int = Field(16, gt=0)
    shot_grid: list[int] = Field(default_factory=lambda: [4, 8, 16, 32, 64])
    test_shots: int = Field(100, gt=0)
    holdout: int = Field(1000, gt=0)
    compare_omega: float = Field(0.0, ge=0.0)
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3])
    output_dir: str = "."
    workers: int = Field(1, gt=0)

    @model_validator(mode="after")
    def _lists(self):
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if any(s <= 0 for s in self.shot_grid):
            raise ValueError("shot_grid entries must be positive")
        if self.recipe == "gap-sweep":
            if len(self.shot_grid) < 3:
                raise ValueError("gap-sweep needs at least 3 shot_grid points")
            if len(self.seeds) < 3:
                raise ValueError("gap-sweep needs at least 3 seeds")
        if self.recipe == "shot-sweep" and not self.shot_grid:
            raise ValueError("shot-sweep needs a non-empty shot_grid")
        return self

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def train_config(self, seed: int) -> TrainConfig:
        return self.train.build(seed)


class ConfigError(Exception):
    """Config file could not be read, parsed or validated."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics))


def _format_validation(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        out.append(f"field {loc}: {e['msg']}")
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror or exc}"]) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: expected a JSON object"])
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


def defaulted_fields(cfg: ExperimentConfig) -> list[dict]:
    """Every field left at its default, tagged with where the default comes from."""
    out = []

    def walk(model: BaseModel, prefix: str):
        for name in type(model).model_fields:
            key = f"{prefix}{name}"
            value = getattr(model, name)
            if isinstance(value, BaseModel):
                walk(value, f"{key}.")
            elif name not in model.model_fields_set:
                source = "paper default" if key in PAPER_DEFAULTS else "artifact default"
                out.append({"field": key, "value": value, "source": source})

    walk(cfg, "")
    return out


def validate(path) -> dict:
    """Schema and invariant check without running anything."""
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        return {"valid": False, "errors": exc.diagnostics, "defaults": []}
    return {"valid": True, "errors": [], "defaults": defaulted_fields(cfg),
            "resolved": cfg.model_dump()}
