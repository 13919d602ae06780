"""Declarative experiment configuration (YAML, versioned schema)."""

from __future__ import annotations

import hashlib
import json
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

SCHEMA_VERSION = 1
KINDS = ("geometry", "wegner", "ilse", "transport", "hall", "witness", "spectrum")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists ``path: message`` entries."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometrySpec(_Section):
    generator: Literal["perturbed_lattice", "hardcore_fill"] = "perturbed_lattice"
    spacing: float = Field(4.0, gt=0)
    max_displacement: float = Field(0.5, ge=0)
    r: float = Field(1.0, gt=0)
    R: float = Field(2.5, gt=0)
    region: tuple[tuple[float, ...], tuple[float, ...]] = ((-40.0, -40.0), (40.0, 40.0))
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.region
        if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("region must be a nonempty box (lo < hi componentwise)")
        if self.generator == "perturbed_lattice" and self.max_displacement >= self.spacing / 2:
            raise ValueError("max_displacement must be below spacing/2")
        if self.generator == "hardcore_fill" and self.R <= 2 * self.r:
            raise ValueError("hardcore_fill needs R > 2r")
        return self


class PotentialSpec(_Section):
    radius: float = Field(1.0, gt=0)
    profile: Literal["smooth", "tent"] = "smooth"


class DensitySpec(_Section):
    kind: Literal["uniform", "triangular"] = "uniform"
    lo: float = -1.0
    hi: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if not (self.lo <= 0 <= self.hi and self.lo < self.hi):
            raise ValueError("density support must contain 0 and be nondegenerate")
        return self


class ModelSpec(_Section):
    lam: float = Field(1.0, ge=0)
    background: Literal["laplacian", "landau"] = "laplacian"
    a: float = Field(1.0, gt=0)
    boundary: Literal["periodic", "dirichlet"] = "periodic"
    flux_per_area: float | None = Field(None, gt=0, description="B / (2 pi); B L^2/(2 pi) must be an integer")
    gauge: Literal["landau_y", "landau_x"] = "landau_y"

    @model_validator(mode="after")
    def _check(self):
        if self.background == "landau" and self.flux_per_area is None:
            raise ValueError("landau background needs flux_per_area")
        return self


class GeometryTask(_Section):
    n_sets: int = Field(4, ge=1)
    ribbon_L: float | None = Field(None, gt=0)


class WegnerTask(_Section):
    centers: list[tuple[float, ...]] = [(0.0, 0.0)]
    L: list[float] = [6.0]
    deltas: list[tuple[float, float]] = [(0.9, 1.1)]
    n_real: int = Field(2, ge=1)
    landau_level_energy: float | None = None
    Q_n: float = Field(1.0, gt=0)


class IlseTask(_Section):
    E: float = 0.7
    theta: float = 2.5
    L: float = Field(12.0, gt=0)
    centers: list[tuple[float, ...]] = [(0.0, 0.0)]
    n_real: int = Field(2, ge=1)


class TransportTask(_Section):
    L: float = Field(64.0, gt=0)
    center: tuple[float, ...] = (0.5,)
    cells: list[tuple[float, ...]] = [(0.5,)]
    p: float = Field(2.0, ge=0)
    T: list[float] = [2.0, 5.0, 12.0, 30.0, 70.0]
    filter_support: tuple[float, float] | None = None
    filter_plateau: tuple[float, float] | None = None
    n_real: int = Field(2, ge=1)
    min_realizations: int = Field(1, ge=1)
    alpha: float = 1.0
    s: float = Field(1.0, gt=0, le=1)


class HallTask(_Section):
    L: float = Field(16.0, gt=0)
    center: tuple[float, float] = (0.0, 0.0)
    fermi_energies: list[float] = [0.6]
    n_real: int = Field(1, ge=1)


class WitnessTask(_Section):
    side: float = Field(5.0, gt=0)
    level: int = Field(0, ge=0)
    etas: list[float] = [0.0, 1.0]
    n_real: int = Field(20, ge=1)
    C: float = Field(1.0, gt=0)
    delta: float = Field(0.0, ge=0)
    coupling_tolerance: float | None = Field(None, gt=0)


class SpectrumTask(_Section):
    L: float = Field(8.0, gt=0)
    center: tuple[float, ...] = (0.0, 0.0)
    realization: int = Field(0, ge=0)


_TASKS = {"geometry": GeometryTask, "wegner": WegnerTask, "ilse": IlseTask, "transport": TransportTask,
          "hall": HallTask, "witness": WitnessTask, "spectrum": SpectrumTask}


class ExperimentConfig(_Section):
    """One campaign.  Runtime settings (thread count, output directory) are
    deliberately not part of the config so they never change its hash."""

    schema_version: Literal[1] = SCHEMA_VERSION
    kind: Literal["geometry", "wegner", "ilse", "transport", "hall", "witness", "spectrum"]
    seed: int = 0
    geometry: GeometrySpec = GeometrySpec()
    potential: PotentialSpec = PotentialSpec()
    density: DensitySpec = DensitySpec()
    model: ModelSpec = ModelSpec()
    task: dict = Field(default_factory=dict)

    @property
    def task_spec(self):
        return _TASKS[self.kind].model_validate(self.task)

    def canonical(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_yaml(self):
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)

    def with_seed(self, seed):
        return validate_config(dict(self.model_dump(mode="json"), seed=int(seed)))


def _problems(err: ValidationError, prefix=()):
    out = []
    for e in err.errors():
        loc = [str(p) for p in (*prefix, *e["loc"])]
        out.append(f"{'.'.join(loc) or '<root>'}: {e['msg']}")
    return out


def validate_config(data):
    """Build an :class:`ExperimentConfig` from a mapping, raising :class:`ConfigError`.

    Every invalid field is reported with its dotted path.
    """
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    problems = []
    task = data.get("task") or {}
    kind = data.get("kind")
    if kind in _TASKS:
        try:
            task = _TASKS[kind].model_validate(task).model_dump(mode="json")
        except ValidationError as err:
            problems += _problems(err, ("task",))
    try:
        cfg = ExperimentConfig.model_validate(dict(data, task=task))
    except ValidationError as err:
        problems += _problems(err)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path):
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigError([f"<file>: {err}"]) from None
    return validate_config(data or {})


def default_config(kind, **overrides):
    base = {"kind": kind}
    if kind in ("hall", "witness"):
        base["model"] = {"background": "landau", "lam": 0.0 if kind == "hall" else 1.0,
                         "flux_per_area": 1 / 16 if kind == "hall" else 32 / 25,
                         "a": 1.0 if kind == "hall" else 1 / 8}
    if kind == "ilse":
        base["model"] = {"background": "landau", "lam": 0.0, "flux_per_area": 1 / 16}
    if kind == "witness":
        base["geometry"] = {"spacing": 14.0, "max_displacement": 2.0, "region": [[0, 0], [120, 120]]}
        base["potential"] = {"radius": 1.0, "profile": "tent"}
    if kind == "transport":
        base["geometry"] = {"spacing": 1.0, "max_displacement": 0.0, "region": [[-40], [40]]}
        base["potential"] = {"radius": 0.5, "profile": "tent"}
        base["model"] = {"lam": 1.0, "boundary": "dirichlet"}
    base.update(overrides)
    return validate_config(base)
