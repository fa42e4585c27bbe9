"""Forecast RMSE over every 4 hour window of a split, and the 3x4 results grid."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .training import WindowSource, forecast_window

FAMILIES = ("neural", "bump", "square")
FAMILY_LABELS = {"neural": "Neural", "bump": "Bump", "square": "Square", "truth": "Truth"}


@dataclass(frozen=True)
class EvalSetting:
    """Which noise sources are active: meal timestamps, then glucose observations."""

    time_noise: bool = False
    obs_noise: bool = False

    @property
    def name(self):
        return f"{'noisy' if self.time_noise else 'exact'}-{'noisy' if self.obs_noise else 'exact'}"

    @classmethod
    def parse(cls, name):
        try:
            ts, ob = name.split("-")
            lookup = {"exact": False, "noisy": True}
            return cls(lookup[ts], lookup[ob])
        except (ValueError, KeyError):
            raise ValueError(
                f"setting must be one of {', '.join(s.name for s in SETTINGS)}; got {name!r}"
            ) from None

    @property
    def label(self):
        ts = "Noisy timestamps" if self.time_noise else "Exact timestamps"
        ob = "noisy observations" if self.obs_noise else "exact observations"
        return f"{ts} / {ob}"


SETTINGS = (
    EvalSetting(False, False),
    EvalSetting(False, True),
    EvalSetting(True, False),
    EvalSetting(True, True),
)


@dataclass(frozen=True)
class WindowError:
    start: int
    t_start: float
    n: int
    sse: float

    @property
    def mse(self):
        return self.sse / self.n

    @property
    def rmse(self):
        return math.sqrt(self.mse)


def rmse_all_windows(model, dataset, params, cfg, split="test", dt=None, recorded=True,
                     return_windows=False, chunk=256):
    """Pooled RMSE over every window (stride one observation) of ``split``.

    Each window's warm-up uses the same observations the model is scored
    against, so noisy settings get no clean warm-up.
    """
    source = WindowSource(dataset, split, cfg, dt=dt, recorded=recorded)
    starts = source.valid_starts()
    per_window = []
    for k in range(0, len(starts), chunk):
        w = source.windows(starts[k : k + chunk])
        pred = forecast_window(w, model, params)
        sse = np.sum((pred - w.target_y) ** 2, axis=1)
        per_window.extend(
            WindowError(int(s), float(t), pred.shape[1], float(e))
            for s, t, e in zip(w.starts, w.warm_t[:, -1], sse)
        )
    total = sum(e.sse for e in per_window)
    count = sum(e.n for e in per_window)
    rmse = math.sqrt(total / count)
    return (rmse, per_window) if return_windows else rmse


class ResultsTable:
    """RMSE (mg/dl) per (family, setting name)."""

    def __init__(self, cells=None, families=FAMILIES):
        self.cells = dict(cells or {})
        self.families = tuple(families)

    def __getitem__(self, key):
        return self.cells[key]

    def __setitem__(self, key, value):
        if value < 0:
            raise ValueError("RMSE must be nonnegative")
        self.cells[key] = float(value)

    def row(self, family):
        return [self.cells.get((family, s.name)) for s in SETTINGS]

    def column(self, setting):
        name = setting if isinstance(setting, str) else setting.name
        return [self.cells.get((f, name)) for f in self.families]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model"] + [f"{s.name}_rmse_mgdl" for s in SETTINGS])
            for fam in self.families:
                w.writerow([fam] + ["" if v is None else f"{v:.6f}" for v in self.row(fam)])

    @classmethod
    def from_csv(cls, path):
        cells, families = {}, []
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        names = [h.rsplit("_rmse_mgdl", 1)[0] for h in rows[0][1:]]
        for row in rows[1:]:
            families.append(row[0])
            for name, v in zip(names, row[1:]):
                if v:
                    cells[(row[0], name)] = float(v)
        return cls(cells, families)

    def to_text(self):
        head = ["", "Exact timestamps", "", "Noisy timestamps", ""]
        sub = ["a_i", "Exact obs.", "Noisy obs.", "Exact obs.", "Noisy obs."]
        body = []
        for fam in self.families:
            vals = ["--" if v is None else f"{v:.2f} mg/dl" for v in self.row(fam)]
            body.append([FAMILY_LABELS.get(fam, fam)] + vals)
        rows = [head, sub] + body
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        fmt = lambda r: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))  # noqa: E731
        rule = "-" * len(fmt(sub))
        return "\n".join([fmt(head), fmt(sub), rule] + [fmt(r) for r in body]) + "\n"


def build_results_table(models, datasets, params, cfg, dt=None, allow_missing=False,
                        families=FAMILIES, window_sink=None):
    """Evaluate ``models[(family, setting)]`` on ``datasets[setting]`` for every cell.

    Models are scored on recorded meal times, i.e. under the same noise setting
    they were trained with.
    """
    table = ResultsTable(families=families)
    for fam in families:
        for setting in SETTINGS:
            key = (fam, setting.name)
            if key not in models or setting.name not in datasets:
                if allow_missing:
                    continue
                raise KeyError(f"no model or dataset for cell {fam} / {setting.name}")
            rmse, windows = rmse_all_windows(
                models[key], datasets[setting.name], params, cfg, dt=dt, return_windows=True
            )
            table[key] = rmse
            if window_sink is not None:
                window_sink(fam, setting.name, windows)
    return table


def write_window_errors(rows, path):
    """``rows`` are ``(family, setting, WindowError)`` triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "setting", "start_index", "t_start_min", "n_targets", "mse_mgdl2", "rmse_mgdl"])
        for fam, setting, e in rows:
            w.writerow([fam, setting, e.start, repr(e.t_start), e.n, f"{e.mse:.9g}", f"{e.rmse:.9g}"])
