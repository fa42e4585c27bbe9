"""Run configuration: one TOML file with [simulation], [training], [patient]
and [evaluation] tables. Every key has a default; unknown keys are errors."""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .evaluation import EvalSetting
from .odecore import PatientParams
from .simulator import SimulationConfig
from .training import TrainingConfig

OUTPUT_ENV = "HYBRIDGLUCOSE_OUT"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def default_output_root():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@dataclass(frozen=True)
class EvalOptions:
    setting: EvalSetting = EvalSetting()
    dt: float | None = None
    dump_windows: bool = False


@dataclass(frozen=True)
class RunConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    patient: PatientParams = field(default_factory=PatientParams)
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    output_dir: Path = field(default_factory=default_output_root)
    seed: int = 0

    def with_seed(self, seed):
        return replace(
            self,
            seed=seed,
            simulation=replace(self.simulation, seed=seed),
            training=replace(self.training, seed=seed),
        )

    def with_setting(self, setting):
        sim = replace(self.simulation, obs_noise=setting.obs_noise, time_noise=setting.time_noise)
        return replace(self, simulation=sim, evaluation=replace(self.evaluation, setting=setting))


_TUPLE_KEYS = {"meal_slots", "split_days", "truth_bump"}


def _build(cls, table, section):
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"unknown key '{section}.{key}'", f"{section}.{key}")
        if key in _TUPLE_KEYS:
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}", section) from exc


def parse_config(data):
    """Build a RunConfig from an already-parsed mapping."""
    data = dict(data)
    known = {"seed", "output_dir", "simulation", "training", "patient", "evaluation"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'", key)
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("'seed' must be an integer", "seed")
    sim_table = dict(data.get("simulation", {}))
    sim_table.setdefault("seed", seed)
    train_table = dict(data.get("training", {}))
    train_table.setdefault("seed", seed)
    ev = dict(data.get("evaluation", {}))
    for key in ev:
        if key not in ("setting", "dt", "dump_windows"):
            raise ConfigError(f"unknown key 'evaluation.{key}'", f"evaluation.{key}")
    try:
        setting = EvalSetting.parse(ev.get("setting", "exact-exact"))
    except ValueError as exc:
        raise ConfigError(str(exc), "evaluation.setting") from exc
    sim = _build(SimulationConfig, sim_table, "simulation")
    sim = replace(sim, obs_noise=setting.obs_noise, time_noise=setting.time_noise) if "setting" in ev else sim
    return RunConfig(
        simulation=sim,
        training=_build(TrainingConfig, train_table, "training"),
        patient=_build(PatientParams, data.get("patient", {}), "patient"),
        evaluation=EvalOptions(setting, ev.get("dt"), bool(ev.get("dump_windows", False))),
        output_dir=Path(data.get("output_dir", default_output_root())),
        seed=seed,
    )


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)
