import numpy as np
import pytest

from hybridglucose.absorption import MealEvent, TemplateMixtureModel, total_control_uG
from hybridglucose.odecore import PatientParams
from hybridglucose.simulator import (
    InsulinEvent,
    SimulationConfig,
    apply_observation_noise,
    generate_dataset,
    insulin_control_uI,
    load_dataset,
    meal_grams,
    perturb_meal_times,
    sample_insulin_events,
    sample_meals,
    save_dataset,
)


@pytest.fixture(scope="module")
def default_ds():
    return generate_dataset(SimulationConfig())


def test_grid_and_counts(default_ds):
    ds = default_ds
    assert len(ds.t) == 28 * 24 * 12 == 8064
    assert len(ds.meals_true) == 112 and len(ds.insulin) == 112
    assert np.all(np.diff(ds.t) == 5.0)


def test_splits_are_contiguous_and_disjoint(default_ds):
    s = default_ds.splits
    assert s["train"][0] == 0 and s["train"][1] == s["val"][0] and s["val"][1] == s["test"][0]
    assert s["test"][1] == len(default_ds.t)
    assert s["train"][1] == 20 * 288


def test_fixed_point_without_meals():
    cfg = SimulationConfig(days=2, split_days=(1, 0, 1), meal_slots=())
    ds = generate_dataset(cfg)
    assert not ds.meals_true and not ds.insulin
    assert np.all(ds.y == PatientParams().Gb)


def test_meal_slots_and_dinner_mean():
    cfg = SimulationConfig()
    rng = np.random.default_rng(0)
    dinners, lunches = [], []
    for day in range(2000):
        meals = sample_meals(day, cfg, rng)
        for e, (start, end, lo, hi) in zip(meals, cfg.meal_slots):
            assert start <= e.t - day * 1440 <= end
            assert lo - 1e-9 <= meal_grams(e, cfg) <= hi + 1e-9
            assert abs(sum(e.m) - 1) < 1e-12
        lunches.append(meal_grams(meals[1], cfg))
        dinners.append(meal_grams(meals[2], cfg))
    assert abs(np.mean(dinners) - 70.0) < 1.0
    assert abs(np.mean(lunches) - 45.0) < 1.0


def test_unit_bridges():
    cfg = SimulationConfig()
    meal = MealEvent(0.0, (1, 0, 0), 0.0)
    # 70 g into 50 dl is 1400 mg/dl
    seventy = MealEvent(0.0, (1, 0, 0), 70 * 1000 / 50)
    assert meal_grams(seventy, cfg) == pytest.approx(70.0)
    assert meal_grams(meal, cfg) == 0.0
    assert 70.0 / 7.0 == 10.0


def test_bolus_statistics():
    cfg = SimulationConfig()
    rng = np.random.default_rng(1)
    meals = [MealEvent(1000.0, (1, 0, 0), 1400.0)] * 100_000
    events = sample_insulin_events(meals, cfg, rng)
    offsets = np.array([ev.time for ev in events]) - 1000.0
    doses = np.array([ev.dose for ev in events])
    assert abs(offsets.mean()) < 0.1 and abs(offsets.std() - 10.0) < 0.1
    conversions = 70.0 / doses
    assert conversions.min() > 3.0
    assert abs(conversions.mean() - 7.0) < 0.02
    assert all(ev.duration == 30.0 for ev in events[:10])


def test_bolus_times_clamped_to_horizon():
    cfg = SimulationConfig()
    rng = np.random.default_rng(2)
    meals = [MealEvent(0.0, (1, 0, 0), 100.0), MealEvent(500.0, (1, 0, 0), 100.0)] * 200
    times = [ev.time for ev in sample_insulin_events(meals, cfg, rng, horizon=500.0)]
    assert min(times) >= 0.0 and max(times) <= 500.0


def test_insulin_square_integral_and_additivity():
    from scipy.integrate import quad

    cfg = SimulationConfig()
    ev = InsulinEvent(100.0, 10.0)
    total, _ = quad(lambda t: insulin_control_uI(t, [ev], cfg), 50, 200, points=[100, 130])
    assert total == pytest.approx(10.0 * cfg.insulin_k, rel=1e-9)
    other = InsulinEvent(115.0, 4.0)
    t = np.linspace(90, 160, 200)
    both = insulin_control_uI(t, [ev, other], cfg)
    assert np.allclose(both, insulin_control_uI(t, [ev], cfg) + insulin_control_uI(t, [other], cfg), rtol=1e-14)


def test_observation_noise():
    trace = np.full(100_000, 120.0)
    cfg_off = SimulationConfig()
    assert np.array_equal(apply_observation_noise(trace, cfg_off, np.random.default_rng(0)), trace)
    cfg_on = SimulationConfig(obs_noise=True)
    y = apply_observation_noise(trace, cfg_on, np.random.default_rng(0))
    assert abs(np.std(y / trace - 1) - 0.05) < 0.05 * 0.05
    assert np.all(apply_observation_noise(np.zeros(10), cfg_on, np.random.default_rng(0)) == 0)


def test_meal_time_noise():
    rng = np.random.default_rng(3)
    events = [MealEvent(float(i), (0.2, 0.3, 0.5), 321.0) for i in range(100_000)]
    assert perturb_meal_times(events, SimulationConfig(), rng) == events
    rec = perturb_meal_times(events, SimulationConfig(time_noise=True), rng)
    shift = np.array([r.t - e.t for r, e in zip(rec, events)])
    assert abs(shift.mean() - 5.0) < 0.05 and abs(shift.std() - 2.5) < 0.05
    assert all(r.g == e.g and r.m == e.m for r, e in zip(rec[:1000], events[:1000]))


def test_stored_uG_matches_event_sum(default_ds):
    ds = default_ds
    idx = np.arange(0, len(ds.t), 7)
    want = total_control_uG(ds.t[idx], ds.meals_true, TemplateMixtureModel())
    assert np.max(np.abs(ds.truth["uG"][idx] - want)) < 1e-9


def test_uG_integral_equals_glucose_content(default_ds):
    ds = default_ds
    total = np.trapezoid(ds.truth["uG"], ds.t)
    expected = sum(e.g for e in ds.meals_true)
    assert abs(total - expected) < 0.01 * expected


def test_noise_flags_only_touch_their_fields(default_ds):
    ds = generate_dataset(SimulationConfig(obs_noise=True, time_noise=True))
    assert np.array_equal(ds.truth["G"], default_ds.truth["G"])
    assert ds.meals_true == default_ds.meals_true
    assert not np.array_equal(ds.y, default_ds.y)
    assert [e.t for e in ds.meals_recorded] != [e.t for e in ds.meals_true]


def test_determinism():
    cfg = SimulationConfig(days=3, split_days=(1, 1, 1), obs_noise=True, time_noise=True, seed=11)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert np.array_equal(a.y, b.y) and a.meals_recorded == b.meals_recorded and a.insulin == b.insulin
    assert a.fingerprint() == b.fingerprint()
    c = generate_dataset(SimulationConfig(days=3, split_days=(1, 1, 1), seed=12))
    assert c.fingerprint() != a.fingerprint()


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(days=3, split_days=(1, 1, 2))
    with pytest.raises(ValueError):
        SimulationConfig(obs_interval=5.05)
    with pytest.raises(ValueError):
        SimulationConfig(truth="spline")


def test_save_load_roundtrip(tmp_path):
    cfg = SimulationConfig(days=2, split_days=(1, 0, 1), obs_noise=True, time_noise=True, seed=5)
    ds = generate_dataset(cfg)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.t, ds.t) and np.array_equal(back.y, ds.y)
    for key in ds.truth:
        assert np.array_equal(back.truth[key], ds.truth[key])
    assert back.meals_true == ds.meals_true and back.meals_recorded == ds.meals_recorded
    assert back.insulin == ds.insulin and back.config == ds.config and back.splits == ds.splits
    assert back.fingerprint() == ds.fingerprint()


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


@pytest.mark.slow
def test_glucose_stays_physiological_across_seeds():
    for seed in range(50):
        G = generate_dataset(SimulationConfig(seed=seed)).truth["G"]
        assert 20.0 < G.min() and G.max() < 450.0, seed
