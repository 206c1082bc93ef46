"""Run configuration for the command-line tools.

One JSON document configures every subcommand; each subcommand reads its own
block plus the shared seed, precision and paths. Unknown keys are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .condnets import AuxTrainConfig
from .errors import ConfigError
from .synth import SyntheticSceneSpec
from .training import LossWeights, TrainConfig


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Paths(_Block):
    data: str | None = None
    aux: str | None = None
    model: str | None = None
    bundle: str | None = None
    scorecards: str | None = None


class SynthBlock(_Block):
    n_cubes: int = Field(8, ge=0)
    cube_width: int = Field(32, ge=1)
    cube_height: int = Field(32, ge=1)
    n_bands: int = Field(32, ge=3)
    temperature_range_K: tuple[float, float] = (280.0, 320.0)
    alpha_range: tuple[float, float] = (0.1, 1.0)
    library_size: int = Field(64, ge=1)
    target_fraction: float = Field(0.25, gt=0.0, le=1.0)
    lambda_min: float = 7.56
    lambda_max: float = 13.16

    def to_spec(self, seed: int) -> SyntheticSceneSpec:
        return SyntheticSceneSpec(seed=seed, **self.model_dump())


class AuxBlock(_Block):
    epochs: int = Field(1000, ge=1)
    lr: float = Field(9e-4, gt=0.0)
    weight_decay: float = Field(5e-5, ge=0.0)
    sets_per_cube: int = Field(16, ge=1)
    set_size: int = Field(200, ge=1)

    def to_config(self, seed: int) -> AuxTrainConfig:
        return AuxTrainConfig(seed=seed, **self.model_dump())


class AuxPair(_Block):
    propnet: AuxBlock = AuxBlock()
    bgnet: AuxBlock = AuxBlock(lr=1e-3)
    n_val_cubes: int = Field(0, ge=0)


class WeightsBlock(_Block):
    omega1: float = Field(1.0, ge=0.0)
    omega2: float = Field(1.0, ge=0.0)
    omega3: float = Field(1.0, ge=0.0)
    shape: float = Field(1.0, ge=0.0)
    smooth: float = Field(1.0, ge=0.0)
    sdev: float = Field(1.0, ge=0.0)
    mean: float = Field(1.0, ge=0.0)
    eps_bar: float = Field(1.0, ge=0.0)
    eps: float = Field(1.0, ge=0.0)
    radiance: float = Field(0.0, ge=0.0)


class TrainBlock(_Block):
    epochs: int = Field(150, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    lr_decay: float = Field(0.99, gt=0.0, le=1.0)
    decay_mode: Literal["lr", "param"] = "lr"
    weight_decay: float = Field(5e-5, ge=0.0)
    batch_size: int = Field(64, ge=1)
    gp_lengthscale: float = Field(0.4, gt=0.0)
    gp_variance: float = Field(1.0, ge=0.0)
    ramp_start: float = Field(0.2, ge=0.0, le=1.0)
    ramp_end: float = Field(0.4, ge=0.0, le=1.0)
    reg_start: float = Field(0.4, ge=0.0, le=1.0)
    squared_propagation: bool = False
    weights: WeightsBlock = WeightsBlock()
    d_z: int = Field(64, ge=2)
    n_val_cubes: int = Field(1, ge=0)
    resume: bool = False

    @field_validator("d_z")
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("d_z must be even")
        return v

    def to_config(self, seed: int, precision: str) -> TrainConfig:
        d = self.model_dump(exclude={"weights", "d_z", "n_val_cubes", "resume"})
        return TrainConfig(seed=seed, precision=precision,
                           weights=LossWeights(**self.weights.model_dump()), **d)


class InferBlock(_Block):
    n_samples: int = Field(1280, ge=2)
    cube_ids: list[str] | None = None
    max_pixels: int | None = Field(None, ge=1)
    unconditioned: bool = False


class MatchBlock(_Block):
    ridge: bool = True
    baselines: list[Literal["L2", "CD"]] = ["L2", "CD"]


class HitrateBlock(_Block):
    k_values: list[int] = [1, 5, 10, 20]
    alpha_min: list[float] = [0.1, 0.25, 0.5, 0.75]

    @field_validator("k_values")
    @classmethod
    def _positive(cls, v: list[int]) -> list[int]:
        if not v or min(v) < 1:
            raise ValueError("k_values must be nonempty and >= 1")
        return sorted(v)


class RunConfig(_Block):
    seed: int = Field(0, ge=0)
    precision: Literal["f32", "f64"] = "f64"
    paths: Paths = Paths()
    synth: SynthBlock = SynthBlock()
    aux: AuxPair = AuxPair()
    train: TrainBlock = TrainBlock()
    infer: InferBlock = InferBlock()
    match: MatchBlock = MatchBlock()
    hitrate: HitrateBlock = HitrateBlock()


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read and validate a JSON config; top-level ``overrides`` replace keys."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
