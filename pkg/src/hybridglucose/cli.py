"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing input, 4 domain error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .absorption import TemplateMixtureModel, total_control_uG
from .checkpoint import ModelCheckpoint
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    FAMILIES,
    SETTINGS,
    EvalSetting,
    ResultsTable,
    build_results_table,
    rmse_all_windows,
    write_window_errors,
)
from .odecore import BlowUpError
from .simulator import generate_dataset, load_dataset, save_dataset, truth_model
from .training import TrainingDivergedError, WindowSource, forecast_window, train, write_log

log = logging.getLogger("hybridglucose")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DOMAIN = 4


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_cfg(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise CLIError(f"config file not found: {args.config}", EXIT_MISSING) from exc
    except ConfigError as exc:
        raise CLIError(f"config error: {exc}", EXIT_CONFIG) from exc
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "setting", None):
        cfg = cfg.with_setting(_parse_setting(args.setting))
    if getattr(args, "dt_train", None) is not None:
        try:
            cfg = replace(cfg, training=replace(cfg.training, dt_train=args.dt_train))
        except ValueError as exc:
            raise CLIError(f"config error: {exc}", EXIT_CONFIG) from exc
    return cfg


def _parse_setting(name):
    try:
        return EvalSetting.parse(name)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise CLIError(str(exc), EXIT_MISSING) from exc


def _load_checkpoint(path):
    try:
        return ModelCheckpoint.load(path)
    except FileNotFoundError as exc:
        raise CLIError(f"checkpoint not found: {path}", EXIT_MISSING) from exc


def _dataset_setting(ds):
    return EvalSetting(ds.config.time_noise, ds.config.obs_noise)


# -- simulate ----------------------------------------------------------------


def run_simulate(cfg, out_dir):
    ds = generate_dataset(cfg.simulation, cfg.patient)
    save_dataset(ds, out_dir)
    return ds


def cmd_simulate(args):
    cfg = _load_cfg(args)
    out = Path(args.out) if args.out else cfg.output_dir / "data"
    ds = run_simulate(cfg, out)
    print(
        f"days={ds.config.days} observations={len(ds.t)} meals={len(ds.meals_true)} "
        f"boluses={len(ds.insulin)} setting={_dataset_setting(ds).name} -> {out}"
    )
    return 0


# -- train -------------------------------------------------------------------


def run_train(cfg, data_dir, family, out_dir):
    ds = _load_data(data_dir)
    setting = _dataset_setting(ds)
    try:
        model, reports = train(ds, family, ds.params, cfg.training)
    except TrainingDivergedError as exc:
        raise CLIError(f"training diverged: {exc}", EXIT_DOMAIN) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = ModelCheckpoint.from_model(model, setting.name, cfg.training.to_dict(), ds.fingerprint())
    ckpt.save(out / f"{family}_{setting.name}.json")
    write_log(reports, out / f"{family}_{setting.name}_log.csv")
    vals = [r.val_rmse for r in reports if np.isfinite(r.val_rmse)]
    return ckpt, (vals[-1] if vals else float("nan"))


def cmd_train(args):
    cfg = _load_cfg(args)
    out = Path(args.out) if args.out else cfg.output_dir / "models"
    _, val = run_train(cfg, args.data, args.family, out)
    print(f"family={args.family} final_val_rmse={val:.4f} mg/dl -> {out}")
    return 0


# -- evaluate ----------------------------------------------------------------


def _datasets_under(path):
    """A dataset directory, or a directory of per-setting dataset directories."""
    root = Path(path)
    if (root / "manifest.json").exists():
        ds = _load_data(root)
        return {_dataset_setting(ds).name: ds}
    found = {}
    for s in SETTINGS:
        if (root / s.name / "manifest.json").exists():
            found[s.name] = _load_data(root / s.name)
    if not found:
        raise CLIError(f"no dataset found under {root}", EXIT_MISSING)
    return found


def run_evaluate(cfg, datasets, checkpoints, out_dir, ground_truth=False, dump_windows=False):
    models = {}
    for ckpt in checkpoints:
        ds = datasets.get(ckpt.setting)
        if ds is None:
            log.warning("no dataset for setting %s; skipping %s checkpoint", ckpt.setting, ckpt.family)
            continue
        if ckpt.dataset_fingerprint and ckpt.dataset_fingerprint != ds.fingerprint():
            log.warning("%s/%s checkpoint was trained on a different dataset", ckpt.family, ckpt.setting)
        models[(ckpt.family, ckpt.setting)] = ckpt.model()
    families = FAMILIES
    if ground_truth:
        families = FAMILIES + ("truth",)
        for name, ds in datasets.items():
            models[("truth", name)] = truth_model(ds.config)
    windows = []
    sink = (lambda f, s, ws: windows.extend((f, s, w) for w in ws)) if dump_windows else None
    params = next(iter(datasets.values())).params
    try:
        table = build_results_table(
            models, datasets, params, cfg.training, dt=cfg.evaluation.dt,
            allow_missing=True, families=families, window_sink=sink,
        )
    except BlowUpError as exc:
        raise CLIError(str(exc), EXIT_DOMAIN) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "results.csv")
    (out / "results.txt").write_text(table.to_text())
    if dump_windows:
        write_window_errors(windows, out / "windows.csv")
    return table


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    if args.dt_eval is not None:
        cfg = replace(cfg, evaluation=replace(cfg.evaluation, dt=args.dt_eval))
    datasets = _datasets_under(args.data)
    checkpoints = [_load_checkpoint(p) for p in args.checkpoint]
    out = Path(args.out) if args.out else cfg.output_dir / "results"
    table = run_evaluate(
        cfg, datasets, checkpoints, out,
        ground_truth=args.ground_truth,
        dump_windows=args.dump_windows or cfg.evaluation.dump_windows,
    )
    print(table.to_text(), end="")
    return 0


# -- forecast ----------------------------------------------------------------


def run_forecast(cfg, ds, model, start, horizon, out_path, dt=None):
    """Forecast from the observation at ``start`` (min) for ``horizon`` minutes."""
    step = ds.obs_interval
    k0 = int(round(start / step))
    n_targets = int(round(horizon / step))
    F = cfg.training.warmup
    if abs(k0 * step - start) > 1e-9 or n_targets < 1:
        raise CLIError("start must lie on the observation grid and horizon must cover one step", EXIT_DOMAIN)
    if k0 - (F - 1) < 0 or k0 + n_targets >= len(ds.t):
        raise CLIError(
            f"window [{start}, {start + horizon}] min with {F} warm-up observations "
            f"is outside the dataset (0 to {ds.t[-1]} min)",
            EXIT_DOMAIN,
        )
    source = WindowSource(ds, "train", cfg.training, dt=dt if dt is not None else cfg.evaluation.dt)
    window = source.windows(np.array([k0 - (F - 1)]), n_targets=n_targets)
    try:
        pred = forecast_window(window, model, ds.params)[0]
    except BlowUpError as exc:
        raise CLIError(str(exc), EXIT_DOMAIN) from exc
    times = window.target_t[0]
    pred_uG = total_control_uG(times, ds.meals_recorded, model)
    idx = k0 + 1 + np.arange(n_targets)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_min", "observed_G_mgdl", "predicted_G_mgdl", "predicted_uG_mgdl_per_min", "true_uG_mgdl_per_min"])
        for t, yo, yp, up, ut in zip(times, ds.y[idx], pred, pred_uG, ds.truth["uG"][idx]):
            w.writerow([repr(float(t)), repr(float(yo)), repr(float(yp)), repr(float(up)), repr(float(ut))])
    return times, pred


def cmd_forecast(args):
    cfg = _load_cfg(args)
    ds = _load_data(args.data)
    if args.ground_truth:
        model = truth_model(ds.config)
    elif args.checkpoint:
        model = _load_checkpoint(args.checkpoint).model()
    else:
        raise CLIError("forecast needs --checkpoint or --ground-truth", EXIT_CONFIG)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    times, pred = run_forecast(cfg, ds, model, args.start, args.horizon, out, dt=args.dt_eval)
    print(f"forecast {len(times)} points, G in [{pred.min():.1f}, {pred.max():.1f}] mg/dl -> {out}")
    return 0


# -- repro-table1 ------------------------------------------------------------


def _train_job(job):
    cfg, data_dir, family, out_dir = job
    ckpt, val = run_train(cfg, data_dir, family, out_dir)
    return ckpt.dumps(), val


def run_repro(cfg, out_dir, jobs=1):
    out = Path(out_dir)
    data_root = out / "data"
    for setting in SETTINGS:
        run_simulate(cfg.with_setting(setting), data_root / setting.name)
    work = [
        (cfg, data_root / s.name, fam, out / "models")
        for s in SETTINGS
        for fam in FAMILIES
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, work))
    else:
        results = [_train_job(job) for job in work]
    checkpoints = [ModelCheckpoint.loads(text) for text, _ in results]
    datasets = _datasets_under(data_root)
    return run_evaluate(cfg, datasets, checkpoints, out / "results",
                        dump_windows=cfg.evaluation.dump_windows)


def cmd_repro(args):
    cfg = _load_cfg(args)
    if args.dump_windows:
        cfg = replace(cfg, evaluation=replace(cfg.evaluation, dump_windows=True))
    out = Path(args.out) if args.out else cfg.output_dir / "grid"
    table = run_repro(cfg, out, jobs=args.jobs)
    print(table.to_text(), end="")
    return 0


# -- entry -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="hybridglucose", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration (defaults used if omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("simulate", help="generate a virtual-patient dataset")
    common(sp)
    sp.add_argument("--setting", help="noise setting: exact-exact|exact-noisy|noisy-exact|noisy-noisy")
    sp.add_argument("--out", help="dataset directory")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="fit one absorption family")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--family", required=True, choices=FAMILIES)
    sp.add_argument("--dt-train", type=float)
    sp.add_argument("--out", help="checkpoint directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="forecast RMSE table over all test windows")
    common(sp, seed=False)
    sp.add_argument("--data", required=True, help="dataset directory or directory of per-setting datasets")
    sp.add_argument("--checkpoint", nargs="*", default=[])
    sp.add_argument("--ground-truth", action="store_true", help="add a row for the generating model")
    sp.add_argument("--dump-windows", action="store_true", help="also write per-window errors")
    sp.add_argument("--dt-train", type=float)
    sp.add_argument("--dt-eval", type=float, help="integration step for evaluation (default dt_train)")
    sp.add_argument("--out", help="results directory")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("forecast", help="write a forecast CSV for plotting")
    common(sp, seed=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--ground-truth", action="store_true")
    sp.add_argument("--start", type=float, required=True, help="forecast origin (min)")
    sp.add_argument("--horizon", type=float, required=True, help="forecast length (min)")
    sp.add_argument("--dt-train", type=float)
    sp.add_argument("--dt-eval", type=float)
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("repro-table1", help="simulate, train 3 families x 4 settings, evaluate")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--dump-windows", action="store_true")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
