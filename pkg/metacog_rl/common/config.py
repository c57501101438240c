"""Run configuration: TOML sections mapped onto frozen dataclasses."""
import dataclasses
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Type

import numpy as np

from metacog_rl.common.errors import ConfigError, MetacogError
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.common.stl import Formula, Predicate, PredicateStack, parse_expression, parse_formula
from metacog_rl.common.utils import grid_steps
from metacog_rl.envs.lane_change import (
    LtiPlant,
    ScenarioSchedule,
    VehicleParams,
    actuator_loss,
    perturbed_matrices,
    vehicle_matrices,
)
from metacog_rl.low_level.off_policy_adp import RlConfig, required_intervals
from metacog_rl.metacognitive.fitness import FitnessConfig
from metacog_rl.metacognitive.safe_bo import SboConfig, free_indices


if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class ScenarioConfig:
    """Lane-change scenario (the ``[scenario]`` section).

    At ``change_time`` (disabled when negative) the vehicle speeds up by ``delta_v`` and keeps only the fraction
    ``actuator_gain`` of its steering effectiveness.
    """

    seed: int
    horizon: float = 15.0
    dt: float = 1e-3
    delta_v: float = 8.0
    actuator_gain: float = 1.0
    switch_time: float = 4.0
    change_time: float = 4.0
    setpoints: Tuple[float, ...] = (1.0, 3.0)
    setpoint_axis: int = 0
    switch_duration: float = 3.0
    x0: Optional[Tuple[float, ...]] = None
    x0_noise: float = 0.0

    def __post_init__(self):
        if self.horizon <= 0 or self.dt <= 0:
            raise ValueError(f"horizon and dt must be positive, got {self.horizon}, {self.dt}")
        if not self.setpoints:
            raise ValueError("at least one setpoint is needed")
        if self.switch_time <= 0 and len(self.setpoints) > 1:
            raise ValueError(f"switch_time must be positive, got {self.switch_time}")
        if (len(self.setpoints) - 1) * self.switch_time > self.horizon:
            raise ValueError(f"{len(self.setpoints)} setpoints switched every {self.switch_time}s exceed the horizon")
        if self.change_time > self.horizon:
            raise ValueError(f"change_time {self.change_time} is beyond the horizon {self.horizon}")
        if not 0 < self.actuator_gain <= 1:
            raise ValueError(f"actuator_gain must be in (0, 1], got {self.actuator_gain}")
        if self.change_time >= 0 and self.delta_v == 0 and self.actuator_gain == 1:
            raise ValueError("the change needs a non-zero delta_v or an actuator_gain below 1")
        if self.x0_noise < 0:
            raise ValueError(f"x0_noise must be non-negative, got {self.x0_noise}")
        object.__setattr__(self, "setpoints", tuple(float(v) for v in self.setpoints))


@dataclass(frozen=True)
class StlConfig:
    """Specification monitored on the output and the safety predicates of the stack."""

    spec: str = "G[0,15](abs(x1 - r) < 1)"
    safety: Tuple[str, ...] = ("1 - abs(x1 - r)",)

    def __post_init__(self):
        object.__setattr__(self, "safety", tuple(self.safety))


@dataclass(frozen=True)
class OutputConfig:
    out_dir: str = "out"
    wandb: bool = False
    project_name: str = "metacog-rl"
    experiment_name: str = "metacog"


SECTIONS: Dict[str, Type] = {
    "vehicle": VehicleParams,
    "scenario": ScenarioConfig,
    "stl": StlConfig,
    "fitness": FitnessConfig,
    "sbo": SboConfig,
    "rl": RlConfig,
    "output": OutputConfig,
}
REQUIRED_SECTIONS = ("vehicle", "scenario")


@dataclass(frozen=True)
class RunConfig:
    """A complete run configuration; every section is validated, then checked against the others."""

    vehicle: VehicleParams
    scenario: ScenarioConfig
    stl: StlConfig = field(default_factory=StlConfig)
    fitness: FitnessConfig = field(default_factory=FitnessConfig)
    sbo: SboConfig = field(default_factory=SboConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.validate()

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def plant(self) -> LtiPlant:
        return vehicle_matrices(self.vehicle)

    def changed_plant(self) -> LtiPlant:
        sc = self.scenario
        plant = perturbed_matrices(self.vehicle, sc.delta_v) if sc.delta_v != 0 else self.plant()
        return actuator_loss(plant, sc.actuator_gain)

    def setpoint(self, value: float) -> np.ndarray:
        r = np.zeros(self.plant().n)
        r[self.scenario.setpoint_axis] = value
        return r

    def schedule(self) -> ScenarioSchedule:
        sc = self.scenario
        plan = [(i * sc.switch_time, self.setpoint(v)) for i, v in enumerate(sc.setpoints)]
        events = [(sc.change_time, self.changed_plant())] if sc.change_time >= 0 else []
        return ScenarioSchedule(
            horizon=sc.horizon,
            dt=sc.dt,
            setpoint_plan=plan,
            events=events,
            stl_spec=self.stl.spec,
            seed=sc.seed,
            switch_duration=sc.switch_duration,
            x0=None if sc.x0 is None else np.asarray(sc.x0, dtype=float),
            x0_noise=sc.x0_noise,
        )

    def theta0(self) -> HyperParams:
        """Initial hyperparameters: the ``[rl]`` weights and the first setpoint."""
        return HyperParams(np.array(self.rl.q), np.array(self.rl.r), self.setpoint(self.scenario.setpoints[0]))

    def formula(self) -> Formula:
        n, m = self.plant().n, self.plant().m
        schema = [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + [f"r{i + 1}" for i in range(n)]
        return parse_formula(self.stl.spec, schema + ["r"])

    def stack(self) -> PredicateStack:
        safety = [Predicate.from_expression(text) for text in self.stl.safety]
        return PredicateStack(safety, self.fitness.eps, self.theta0().setpoint)

    def validate(self):
        """Cross-section checks.

        Raises:
            ConfigError: naming the first offending key
        """
        plant = self.plant()
        n, m = plant.n, plant.m
        sc = self.scenario
        if not 0 <= sc.setpoint_axis < n:
            raise ConfigError("scenario.setpoint_axis", f"must be in [0, {n - 1}], got {sc.setpoint_axis}")
        if sc.x0 is not None and len(sc.x0) != n:
            raise ConfigError("scenario.x0", f"needs {n} entries, got {len(sc.x0)}")
        for key, duration in (("fitness.T", self.fitness.T), ("rl.T_int", self.rl.T_int)):
            try:
                grid_steps(duration, sc.dt, key)
            except ValueError as e:
                raise ConfigError(key, str(e)) from e
        if len(self.fitness.lengthscales_x) != n:
            raise ConfigError("fitness.lengthscales_x", f"needs {n} entries, got {len(self.fitness.lengthscales_x)}")
        if len(self.rl.q) != n:
            raise ConfigError("rl.q", f"needs {n} entries, got {len(self.rl.q)}")
        if len(self.rl.r) != m:
            raise ConfigError("rl.r", f"needs {m} entries, got {len(self.rl.r)}")
        if self.rl.N < required_intervals(n, m):
            raise ConfigError("rl.N", f"at least {required_intervals(n, m)} intervals are required, got {self.rl.N}")
        try:
            theta0 = self.theta0()
            free_indices(theta0, self.sbo.free)
        except ValueError as e:
            raise ConfigError("sbo.free", str(e)) from e
        try:
            self.formula()
        except (MetacogError, ValueError) as e:
            raise ConfigError("stl.spec", str(e)) from e
        schema = [f"x{i + 1}" for i in range(n)] + [f"r{i + 1}" for i in range(n)] + ["r"]
        for text in self.stl.safety:
            try:
                parse_expression(text, schema)
            except (MetacogError, ValueError) as e:
                raise ConfigError("stl.safety", f"'{text}': {e}") from e

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, scenario=dataclasses.replace(self.scenario, seed=int(seed)))

    def with_out_dir(self, out_dir: str) -> "RunConfig":
        return dataclasses.replace(self, output=dataclasses.replace(self.output, out_dir=out_dir))

    def to_dict(self) -> dict:
        """Echo of every section, defaults included."""
        return {name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _coerce(key_path: str, value: Any, default: Any) -> Any:
    if isinstance(value, dict):
        raise ConfigError(key_path, "nested tables are not supported")
    if isinstance(value, list):
        return tuple(value)
    if isinstance(default, bool) or isinstance(value, bool):
        if not (isinstance(value, bool) and (isinstance(default, bool) or default is None)):
            raise ConfigError(key_path, f"expected {type(default).__name__}, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if default is not None and not isinstance(default, tuple) and not isinstance(value, type(default)):
        raise ConfigError(key_path, f"expected {type(default).__name__}, got {value!r}")
    return value


def _field_default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def build_section(name: str, data: dict):
    """Dataclass of section ``name`` from its TOML table.

    Raises:
        ConfigError: on unknown keys, wrong types, missing mandatory keys or rejected values
    """
    cls = SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = _coerce(f"{name}.{key}", value, _field_default(fields[key]))
    for key, f in fields.items():
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING and key not in kwargs:
            raise ConfigError(f"{name}.{key}", "missing mandatory key")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from e


def config_from_dict(data: dict) -> RunConfig:
    """RunConfig from parsed TOML tables."""
    for name in data:
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
        if not isinstance(data[name], dict):
            raise ConfigError(name, "expected a table")
    for name in REQUIRED_SECTIONS:
        if name not in data:
            raise ConfigError(name, "missing section")
    sections = {name: build_section(name, table) for name, table in data.items()}
    try:
        return RunConfig(**sections)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError("config", str(e)) from e


def load_config(path: str) -> RunConfig:
    """Reads and validates a TOML run configuration.

    Raises:
        ConfigError: when the file is missing, malformed or invalid
    """
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError("config", f"file '{path}' not found") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("config", f"'{path}' is not valid TOML: {e}") from e
    return config_from_dict(data)
