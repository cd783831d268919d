"""Run configuration: one versioned document with a section per concern.

Unknown keys are rejected at every level. Every seed has an explicit default,
so nothing depends on the wall clock.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import UsageError
from .network import ACTIVATIONS
from .synthetic import SWEEP_KEYS, CorruptionSpec, WorldSpec
from .training import TrainConfig
from .workflow import BASELINES

SCHEMA_VERSION = 1


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldSection(Section):
    n_countries: int = Field(30, ge=2)
    n_years: int = Field(10, ge=1)
    start_year: int = 2010
    eta: float = Field(100.0, gt=0)
    alpha_max: float = Field(0.5, ge=0)
    stock_range: tuple[float, float] = (1e2, 1e5)
    population_range: tuple[float, float] = (1e6, 1e8)
    seed: int = 0

    def spec(self):
        return WorldSpec(**self.model_dump(exclude={"seed"}))


class CorruptionSection(Section):
    stock_noise: float = 0.10
    flow_noise: float = 0.20
    net_noise: float = 0.05
    flow_mask: float = 0.80
    net_mask: float = 0.80
    stock_mask: float = 0.10
    seed: int = 0

    def spec(self):
        return CorruptionSpec(**self.model_dump())


class ArchSection(Section):
    latent_dim: int = Field(100, ge=0)
    depth: int = Field(7, ge=1)
    width: int = Field(60, ge=1)
    activation: str = "tanh"

    @field_validator("activation")
    @classmethod
    def _known(cls, v):
        if v not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {', '.join(ACTIVATIONS)}")
        return v


class TrainSection(Section):
    epochs: int = Field(10_000, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)
    learning_rate: float = 1e-3
    learning_rate_final: Optional[float] = None
    lam_stock: float = 0.7
    lam_net: float = 0.7
    lam_flow: float = 0.7
    seed: int = 0
    test_fraction: float = 0.2
    holdout: bool = False
    stock_feedback_grad: bool = True
    log_flow_cap: float = 30.0
    dtype: Literal["float64", "float32"] = "float64"
    truncate: Optional[int] = Field(None, ge=1)
    init_output_bias: bool = True

    def train_config(self, seed=None):
        kw = self.model_dump(exclude={"holdout"})
        if seed is not None:
            kw["seed"] = seed
        return TrainConfig(**kw)


class EnsembleSection(Section):
    members: int = Field(15, ge=1)
    seed_base: int = 0


class EstimateSection(Section):
    n_samples: int = Field(100, ge=1)
    seed: int = 0
    calibrate: bool = True


class ElasticitySection(Section):
    n_points: Optional[int] = Field(1000, ge=1)
    seed: int = 0


class BaselineSection(Section):
    methods: tuple[str, ...] = BASELINES
    window: int = Field(1, ge=1)

    @field_validator("methods")
    @classmethod
    def _known(cls, v):
        bad = [m for m in v if m not in BASELINES]
        if bad:
            raise ValueError(f"unknown baselines {bad}; choose from {', '.join(BASELINES)}")
        return v


class SweepSection(Section):
    grid: dict[str, list] = Field(default_factory=lambda: {"lam": [0.1, 0.3, 0.5, 0.7, 0.9, 1.0]})

    @field_validator("grid")
    @classmethod
    def _keys(cls, v):
        bad = sorted(set(v) - set(SWEEP_KEYS))
        if bad:
            raise ValueError(f"unknown sweep dimensions {bad}; choose from {', '.join(SWEEP_KEYS)}")
        return v


class RunConfig(Section):
    schema_version: Literal[1] = SCHEMA_VERSION
    world: WorldSection = WorldSection()
    corruption: CorruptionSection = CorruptionSection()
    arch: ArchSection = ArchSection()
    train: TrainSection = TrainSection()
    ensemble: EnsembleSection = EnsembleSection()
    estimate: EstimateSection = EstimateSection()
    elasticity: ElasticitySection = ElasticitySection()
    baseline: BaselineSection = BaselineSection()
    sweep: SweepSection = SweepSection()


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data, overrides):
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} does not name a config field")
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(path=None, overrides=()):
    """Read and validate a JSON run configuration, defaults when ``path`` is None."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"missing config file {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON: {exc}") from None
    data = apply_overrides(data, overrides)
    return validate_config(data)


def validate_config(data):
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise UsageError("invalid configuration:\n  " + "\n  ".join(lines)) from None


def config_dict(config):
    return config.model_dump(mode="json")
