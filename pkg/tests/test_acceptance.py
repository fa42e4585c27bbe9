"""End-to-end acceptance checks. Each test records one PASS/FAIL line.

The full-scale grid (28 days, 1000 iterations, batch 512, 12 runs) takes
20 to 40 minutes on one core. Deselect it with ``-m "not fullscale"``.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from hybridglucose.absorption import BumpModel, BumpParams, MealEvent, TemplateMixtureModel, initial_model
from hybridglucose.checkpoint import ModelCheckpoint
from hybridglucose.cli import main, run_forecast, run_repro
from hybridglucose.config import RunConfig
from hybridglucose.evaluation import SETTINGS, ResultsTable, rmse_all_windows
from hybridglucose.simulator import SimulationConfig, generate_dataset, load_dataset
from hybridglucose.training import TrainingConfig, WindowSource, grad_loss, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def ordered(table, setting):
    neural, bump, square = table.column(setting)
    return neural < bump < square


def fmt_column(table, setting):
    return "/".join(f"{v:.3f}" for v in table.column(setting))


def test_gradient_exactness(criterion):
    t0 = time.time()
    ds = generate_dataset(SimulationConfig(days=3, split_days=(1, 1, 1), seed=1))
    worst, checks = 0.0, 0
    h = 1e-5
    for family in ("square", "bump", "neural"):
        for L in (12, 48):
            for dt in (1.0, 0.5):
                cfg = TrainingConfig(window=L, dt_train=dt)
                src = WindowSource(ds, "train", cfg)
                for seed in range(5):
                    rng = np.random.default_rng(seed)
                    window = src.windows(rng.choice(src.valid_starts(), 8, replace=False))
                    base = initial_model(family, seed=seed)
                    theta = base.theta + rng.normal(0.0, 0.05 if family == "neural" else 0.3, base.theta.size)
                    model = base.with_theta(theta)
                    params = ds.params
                    _, grad = grad_loss(window, model, params, cfg)
                    n = theta.size
                    coords = np.arange(n) if n <= 50 else rng.choice(n, 50, replace=False)
                    scale = np.max(np.abs(grad))
                    for i in coords:
                        tp, tm = theta.copy(), theta.copy()
                        tp[i] += h
                        tm[i] -= h
                        fd = (grad_loss(window, base.with_theta(tp), params, cfg)[0]
                              - grad_loss(window, base.with_theta(tm), params, cfg)[0]) / (2 * h)
                        denom = max(abs(fd), abs(grad[i]), 1e-6 * scale)
                        worst = max(worst, abs(fd - grad[i]) / denom)
                        checks += 1
    elapsed = time.time() - t0
    criterion(
        "gradient exactness",
        worst < 1e-3 and elapsed < 300,
        f"max relative error {worst:.2e} over {checks} coordinates (< 1e-3), {elapsed:.0f} s (< 300 s)",
    )


def test_mass_conservation(criterion):
    rng = np.random.default_rng(0)
    mixture = TemplateMixtureModel()
    worst = 0.0
    for _ in range(100):
        e = MealEvent(float(rng.uniform(0, 1e4)), tuple(rng.dirichlet(np.ones(3))), float(rng.uniform(100, 2000)))
        b1 = rng.uniform(0.01, 0.1)
        bump = BumpModel(BumpParams(b1, b1 * rng.uniform(1.2, 3.0)))
        for model in (bump, mixture):
            # breakpoints at each template delay d and at d + 5, where smoothing kinks the rate
            kinks = [e.t + d for d in (5.0, 10.0, 30.0, 35.0, 300.0)]
            total, _ = quad(lambda t: model.rate(t, e), e.t, e.t + 5000.0, points=kinks, limit=1000)
            worst = max(worst, abs(total - e.g) / e.g)
    criterion("mass conservation", worst < 0.01, f"max relative mass error {worst:.2e} over 100 meals x 2 models (< 1e-2)")


def test_simulator_fixed_point(criterion):
    ds = generate_dataset(SimulationConfig(meal_slots=()))
    drift = float(np.max(np.abs(ds.truth["G"] - ds.params.Gb)))
    drift = max(drift, float(np.max(np.abs(ds.y - ds.params.Gb))))
    criterion("simulator fixed point", drift < 1e-6 and len(ds.t) == 8064, f"max |G - Gb| = {drift:.1e} mg/dl over 28 days (< 1e-6)")


def test_self_consistency(criterion):
    ds = generate_dataset(SimulationConfig())
    rmse = rmse_all_windows(TemplateMixtureModel(), ds, ds.params, TrainingConfig(), dt=0.1, recorded=False)
    criterion("self-consistency", rmse < 0.5, f"ground-truth model test RMSE {rmse:.2e} mg/dl at dt 0.1 (< 0.5)")


def test_bump_recovery(criterion):
    truth = (0.04, 0.09)
    ds = generate_dataset(SimulationConfig(truth="bump", truth_bump=truth))
    model, _ = train(ds, "bump", ds.params, TrainingConfig())
    e1 = abs(model.params.b1 / truth[0] - 1)
    e2 = abs(model.params.b2 / truth[1] - 1)
    criterion(
        "bump recovery",
        e1 < 0.1 and e2 < 0.1,
        f"b1 {model.params.b1:.4f} ({e1:.1%}), b2 {model.params.b2:.4f} ({e2:.1%}) vs {truth} (< 10%)",
    )


@pytest.fixture(scope="module")
def full_scale(tmp_path_factory):
    out = tmp_path_factory.mktemp("fullscale")
    cfg = RunConfig()
    t0 = time.time()
    table = run_repro(cfg, out)
    return cfg, out, table, time.time() - t0


@pytest.mark.fullscale
def test_table_ordering(full_scale, criterion):
    _, _, table, elapsed = full_scale
    columns = {s.name: ordered(table, s) for s in SETTINGS}
    neural_exact = table[("neural", "exact-exact")]
    detail = "; ".join(f"{s.name} {fmt_column(table, s)}" for s in SETTINGS)
    criterion(
        "table ordering (full scale)",
        all(columns.values()) and neural_exact < 5.0,
        f"neural/bump/square: {detail}; neural exact-exact {neural_exact:.3f} (< 5); {elapsed / 60:.0f} min",
    )


@pytest.mark.fullscale
def test_noise_degradation(full_scale, criterion):
    _, _, table, _ = full_scale
    n = dict(zip((s.name for s in SETTINGS), table.row("neural")))
    square = table.row("square")
    spread = (max(square) - min(square)) / min(square)
    neural_ok = n["exact-noisy"] > n["exact-exact"] and n["noisy-noisy"] > n["noisy-exact"]
    criterion(
        "noise degradation",
        neural_ok and spread < 0.2,
        f"neural noisy obs {n['exact-noisy']:.3f}/{n['noisy-noisy']:.3f} vs exact obs "
        f"{n['exact-exact']:.3f}/{n['noisy-exact']:.3f}; square spread {spread:.1%} (< 20%)",
    )


@pytest.mark.fullscale
def test_long_horizon_stability(full_scale, criterion, tmp_path):
    cfg, out, _, _ = full_scale
    ds = load_dataset(out / "data" / "exact-exact")
    model = ModelCheckpoint.load(out / "models" / "neural_exact-exact.json").model()
    lo, _ = ds.split("test")
    start = float(ds.t[lo + cfg.training.warmup - 1])
    try:
        _, pred = run_forecast(cfg, ds, model, start, 2 * 1440.0, tmp_path / "forecast.csv")
    except Exception as exc:  # blow-up is a failed criterion, not an error
        criterion("long-horizon stability", False, f"forecast failed: {exc}")
        return
    ok = bool(np.all(np.isfinite(pred)) and pred.min() > 20 and pred.max() < 450)
    criterion(
        "long-horizon stability",
        ok and len(pred) == 576,
        f"2-day neural forecast from t={start:.0f} min: {len(pred)} points, G in [{pred.min():.1f}, {pred.max():.1f}] mg/dl",
    )


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    runs = []
    for name in ("a", "b"):
        t0 = time.time()
        code = main(["repro-table1", "--config", str(CONFIGS / "smoke.toml"), "--out", str(out / name)])
        runs.append((code, out / name, time.time() - t0))
    return runs


@pytest.mark.slow
def test_smoke_ordering(smoke_runs, criterion):
    code, out, elapsed = smoke_runs[0]
    table = ResultsTable.from_csv(out / "results" / "results.csv")
    criterion(
        "smoke ordering",
        code == 0 and ordered(table, "exact-exact") and elapsed < 600,
        f"exact-exact neural/bump/square {fmt_column(table, 'exact-exact')}, full repro-table1 in {elapsed:.0f} s (< 600 s)",
    )


@pytest.mark.slow
def test_repro_determinism(smoke_runs, criterion):
    (ca, a, _), (cb, b, _) = smoke_runs
    same = [(a / "results" / f).read_bytes() == (b / "results" / f).read_bytes() for f in ("results.csv", "results.txt")]
    ckpts = sorted(p.name for p in (a / "models").glob("*.json"))
    same_models = all((a / "models" / n).read_bytes() == (b / "models" / n).read_bytes() for n in ckpts)
    criterion(
        "repro-table1 determinism",
        ca == cb == 0 and all(same) and same_models and len(ckpts) == 12,
        f"two runs with seed 0: results identical={all(same)}, {len(ckpts)} checkpoints identical={same_models}",
    )
