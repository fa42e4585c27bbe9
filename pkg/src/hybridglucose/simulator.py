"""Virtual-patient data generation.

One patient, four meals a day, an insulin bolus per meal, integrated with the
minimal model at a fine Euler step and sampled on a 5 minute grid.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .absorption import BumpModel, BumpParams, MealEvent, TemplateMixtureModel
from .odecore import BlowUpError, PatientParams, euler_arrays

FORMAT_VERSION = 1

# (start, end) in minutes after midnight, then (min, max) grams
DEFAULT_MEAL_SLOTS = (
    (360.0, 540.0, 5.0, 65.0),  # breakfast 6-9AM
    (660.0, 870.0, 20.0, 70.0),  # lunch 11AM-2:30PM
    (1020.0, 1200.0, 40.0, 100.0),  # dinner 5-8PM
    (1320.0, 1380.0, 5.0, 15.0),  # snack 10-11PM
)

# Meals absorb for far less than this; the slowest template decays as exp(-0.03 t).
TRUTH_SUPPORT = 1440.0


@dataclass(frozen=True)
class SimulationConfig:
    """Data generation settings. Times in minutes, glucose in grams unless noted.

    ``insulin_k`` converts a dose in U into plasma insulin (uU/ml per U):
    1e6 uU spread over the 50 dl (5000 ml) distribution volume.
    """

    days: int = 28
    meal_slots: tuple = DEFAULT_MEAL_SLOTS
    blood_volume_dl: float = 50.0
    bolus_time_sd: float = 10.0
    conversion_mean: float = 7.0
    conversion_sd: float = 1.0
    conversion_min: float = 3.0
    insulin_duration: float = 30.0
    insulin_k: float = 200.0
    obs_interval: float = 5.0
    sim_dt: float = 0.1
    obs_noise: bool = False
    obs_noise_sd: float = 0.05
    time_noise: bool = False
    time_noise_mean: float = 5.0
    time_noise_sd: float = 2.5
    split_days: tuple = (20, 4, 4)
    truth: str = "templates"
    truth_bump: tuple = (0.04, 0.09)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "meal_slots", tuple(tuple(float(v) for v in s) for s in self.meal_slots))
        object.__setattr__(self, "split_days", tuple(int(v) for v in self.split_days))
        object.__setattr__(self, "truth_bump", tuple(float(v) for v in self.truth_bump))
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if sum(self.split_days) != self.days or len(self.split_days) != 3:
            raise ValueError(f"split_days {self.split_days} must be 3 entries summing to days={self.days}")
        for name in ("blood_volume_dl", "insulin_duration", "obs_interval", "sim_dt", "insulin_k"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        steps = self.obs_interval / self.sim_dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("obs_interval must be a multiple of sim_dt")
        if self.truth not in ("templates", "bump"):
            raise ValueError(f"truth must be 'templates' or 'bump', got {self.truth!r}")
        for slot in self.meal_slots:
            if len(slot) != 4 or not (slot[0] < slot[1] and slot[2] <= slot[3]):
                raise ValueError(f"bad meal slot {slot}")

    def to_dict(self):
        d = asdict(self)
        d["meal_slots"] = [list(s) for s in self.meal_slots]
        d["split_days"] = list(self.split_days)
        d["truth_bump"] = list(self.truth_bump)
        return d


@dataclass(frozen=True)
class InsulinEvent:
    time: float
    dose: float
    duration: float = 30.0

    def __post_init__(self):
        if self.dose < 0 or not self.duration > 0:
            raise ValueError(f"invalid insulin event {self}")

    def to_dict(self):
        return {"time": self.time, "dose": self.dose, "duration": self.duration}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["time"]), float(d["dose"]), float(d["duration"]))


@dataclass
class Dataset:
    """Observations on the 5 minute grid plus everything needed to check them.

    ``truth`` holds the noiseless ``G, X, I, uG, uI`` columns sampled at ``t``.
    ``splits`` maps split name to a half-open observation index range.
    """

    t: np.ndarray
    y: np.ndarray
    meals_true: list
    meals_recorded: list
    insulin: list
    truth: dict
    splits: dict
    config: SimulationConfig
    params: PatientParams = field(default_factory=PatientParams)

    @property
    def obs_interval(self):
        return self.config.obs_interval

    def split(self, name):
        return self.splits[name]

    def meals(self, recorded=True):
        return self.meals_recorded if recorded else self.meals_true

    def uI(self, t):
        return insulin_control_uI(t, self.insulin, self.config)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.t).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(json.dumps(_events_payload(self), sort_keys=True).encode())
        return h.hexdigest()[:16]


def grams_to_concentration(grams, cfg):
    if np.any(np.asarray(grams) < 0):
        raise ValueError("grams must be nonnegative")
    return grams * 1000.0 / cfg.blood_volume_dl


def sample_meals(day, cfg, rng):
    """One meal per slot: uniform time and grams, covariate uniform on the simplex."""
    meals = []
    for start, end, lo, hi in cfg.meal_slots:
        t = day * 1440.0 + rng.uniform(start, end)
        grams = rng.uniform(lo, hi)
        m = rng.dirichlet(np.ones(3))
        meals.append(MealEvent(float(t), tuple(m), float(grams_to_concentration(grams, cfg))))
    return meals


def meal_grams(e, cfg):
    return e.g * cfg.blood_volume_dl / 1000.0


def sample_insulin_events(meals, cfg, rng, horizon=None):
    """One bolus per meal, sized by a per-meal sampled grams-per-unit ratio."""
    events = []
    for e in meals:
        t = e.t + rng.normal(0.0, cfg.bolus_time_sd)
        conversion = rng.normal(cfg.conversion_mean, cfg.conversion_sd)
        while conversion <= cfg.conversion_min:
            conversion = rng.normal(cfg.conversion_mean, cfg.conversion_sd)
        if horizon is not None:
            t = min(max(t, 0.0), horizon)
        events.append(InsulinEvent(float(t), float(meal_grams(e, cfg) / conversion), cfg.insulin_duration))
    return events


def insulin_control_uI(t, events, cfg):
    """Square insulin appearance: dose * k_I / duration on [time, time + duration)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    for ev in events:
        on = (t >= ev.time) & (t < ev.time + ev.duration)
        out = out + np.where(on, ev.dose * cfg.insulin_k / ev.duration, 0.0)
    return out if out.ndim else float(out)


def apply_observation_noise(trace, cfg, rng):
    """Relative Gaussian noise, ``y = G (1 + eps)``; identity when disabled."""
    trace = np.asarray(trace, dtype=float)
    if not cfg.obs_noise:
        return trace.copy()
    return trace * (1.0 + rng.normal(0.0, cfg.obs_noise_sd, size=trace.shape))


def perturb_meal_times(events, cfg, rng):
    if not cfg.time_noise:
        return list(events)
    shifts = rng.normal(cfg.time_noise_mean, cfg.time_noise_sd, size=len(events))
    return [replace(e, t=float(e.t + s)) for e, s in zip(events, shifts)]


def truth_model(cfg):
    if cfg.truth == "bump":
        return BumpModel(BumpParams(*cfg.truth_bump))
    return TemplateMixtureModel()


def fine_uG(times, meals, model, support=TRUTH_SUPPORT):
    """Sum of event rates on a uniform grid, each evaluated only over its support."""
    dt = times[1] - times[0] if len(times) > 1 else 1.0
    out = np.zeros(len(times))
    for e in meals:
        i0 = max(int(np.floor((e.t - times[0]) / dt)) - 1, 0)
        i1 = min(int(np.ceil((e.t + support - times[0]) / dt)) + 1, len(times))
        if i1 <= i0:
            continue
        out[i0:i1] += e.g * model.unit_rate(times[i0:i1] - e.t, np.asarray(e.m))
    return out


def generate_dataset(cfg=None, params=None):
    cfg = cfg or SimulationConfig()
    params = params or PatientParams()
    meal_rng, insulin_rng, obs_rng, time_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4)
    )
    n_obs = int(round(cfg.days * 1440.0 / cfg.obs_interval))
    stride = int(round(cfg.obs_interval / cfg.sim_dt))
    t_obs = np.arange(n_obs) * cfg.obs_interval
    horizon = float(t_obs[-1])
    n_fine = (n_obs - 1) * stride + 1
    t_fine = np.arange(n_fine) * cfg.sim_dt

    meals = []
    for day in range(cfg.days):
        meals.extend(sample_meals(day, cfg, meal_rng))
    insulin = sample_insulin_events(meals, cfg, insulin_rng, horizon=horizon)

    uG = fine_uG(t_fine, meals, truth_model(cfg))
    uI = insulin_control_uI(t_fine, insulin, cfg)
    try:
        states = euler_arrays(params, uG[:-1], uI[:-1], (params.Gb, 0.0, params.Ib), cfg.sim_dt)
    except BlowUpError as exc:
        raise BlowUpError(f"simulation blew up for config seed={cfg.seed}, days={cfg.days}: {exc}", exc.step) from exc
    sampled = states[::stride]
    truth = {
        "G": sampled[:, 0].copy(),
        "X": sampled[:, 1].copy(),
        "I": sampled[:, 2].copy(),
        "uG": uG[::stride].copy(),
        "uI": uI[::stride].copy(),
    }
    y = apply_observation_noise(truth["G"], cfg, obs_rng)
    recorded = perturb_meal_times(meals, cfg, time_rng)
    return Dataset(t_obs, y, meals, recorded, insulin, truth, split_bounds(cfg), cfg, params)


def split_bounds(cfg):
    per_day = int(round(1440.0 / cfg.obs_interval))
    a, b, _ = cfg.split_days
    n = cfg.days * per_day
    return {"train": (0, a * per_day), "val": (a * per_day, (a + b) * per_day), "test": ((a + b) * per_day, n)}


# -- persistence -------------------------------------------------------------

OBS_FILE = "observations.csv"
TRUTH_FILE = "ground_truth.csv"
EVENTS_FILE = "events.json"
MANIFEST_FILE = "manifest.json"
TRUTH_COLUMNS = (
    ("G", "G_mgdl"),
    ("X", "X_per_min"),
    ("I", "I_uU_per_ml"),
    ("uG", "uG_mgdl_per_min"),
    ("uI", "uI_uU_per_ml_per_min"),
)


def _fmt(x):
    return repr(float(x))


def _events_payload(ds):
    return {
        "format_version": FORMAT_VERSION,
        "meals_true": [e.to_dict() for e in ds.meals_true],
        "meals_recorded": [e.to_dict() for e in ds.meals_recorded],
        "insulin": [e.to_dict() for e in ds.insulin],
    }


def save_dataset(ds, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / OBS_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_min", "glucose_mgdl"])
        w.writerows((_fmt(t), _fmt(y)) for t, y in zip(ds.t, ds.y))
    with open(out / TRUTH_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_min"] + [label for _, label in TRUTH_COLUMNS])
        cols = [ds.truth[key] for key, _ in TRUTH_COLUMNS]
        for i, t in enumerate(ds.t):
            w.writerow([_fmt(t)] + [_fmt(c[i]) for c in cols])
    (out / EVENTS_FILE).write_text(json.dumps(_events_payload(ds), indent=1) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": ds.config.seed,
        "config": ds.config.to_dict(),
        "patient": ds.params.to_dict(),
        "splits": {k: list(v) for k, v in ds.splits.items()},
        "n_observations": int(len(ds.t)),
        "n_meals": len(ds.meals_true),
        "n_boluses": len(ds.insulin),
        "fingerprint": ds.fingerprint(),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1) + "\n")
    return out


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))


def load_dataset(in_dir):
    src = Path(in_dir)
    for name in (OBS_FILE, TRUTH_FILE, EVENTS_FILE, MANIFEST_FILE):
        if not (src / name).exists():
            raise FileNotFoundError(f"dataset file missing: {src / name}")
    manifest = json.loads((src / MANIFEST_FILE).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {manifest.get('format_version')}")
    _, obs = _read_csv(src / OBS_FILE)
    _, tr = _read_csv(src / TRUTH_FILE)
    events = json.loads((src / EVENTS_FILE).read_text())
    cfg_fields = {f.name for f in fields(SimulationConfig)}
    cfg = SimulationConfig(**{k: v for k, v in manifest["config"].items() if k in cfg_fields})
    truth = {key: tr[:, i + 1].copy() for i, (key, _) in enumerate(TRUTH_COLUMNS)}
    return Dataset(
        t=obs[:, 0].copy(),
        y=obs[:, 1].copy(),
        meals_true=[MealEvent.from_dict(d) for d in events["meals_true"]],
        meals_recorded=[MealEvent.from_dict(d) for d in events["meals_recorded"]],
        insulin=[InsulinEvent.from_dict(d) for d in events["insulin"]],
        truth=truth,
        splits={k: tuple(v) for k, v in manifest["splits"].items()},
        config=cfg,
        params=PatientParams(**manifest["patient"]),
    )
