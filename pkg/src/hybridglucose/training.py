"""End-to-end fitting of absorption models through the unrolled Euler solver.

A window is ``warmup`` observations used to estimate the initial state by
G-forcing, followed by ``window`` target observations that the model forecasts.
The loss is the mean squared error over all targets of a batch, and its
gradient is obtained by a reverse sweep over the stored Euler states.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .absorption import NEURAL_HORIZON, initial_model
from .odecore import BlowUpError, euler_batch, forced_batch

log = logging.getLogger(__name__)

# events starting up to this long after a window still leak into the sigmoid square
FUTURE_LEAD = 60.0


@dataclass(frozen=True)
class TrainingConfig:
    iterations: int = 1000
    batch_size: int = 512
    window: int = 48
    warmup: int = 10
    lr_peak: float = 0.2
    # the MLP dies at 0.2: Adam moves every weight by ~lr per step in the same direction
    neural_lr_peak: float = 0.1
    ramp: int = 30
    dt_train: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 25
    warmup_inside: bool = False
    support: float = NEURAL_HORIZON

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.window <= (self.warmup if self.warmup_inside else 0):
            raise ValueError("window must exceed the warm-up length")
        if self.iterations < 0 or self.batch_size < 1 or self.ramp < 0 or self.eval_every < 1:
            raise ValueError("iterations, batch_size, ramp and eval_every must be positive")
        if not (self.dt_train > 0 and self.lr_peak >= 0 and self.neural_lr_peak >= 0 and self.support > 0):
            raise ValueError("dt_train and support must be positive, lr_peak nonnegative")

    def for_family(self, family):
        """The config with ``lr_peak`` set to the peak used for ``family``."""
        if family == "neural":
            return replace(self, lr_peak=self.neural_lr_peak)
        return self

    @property
    def n_targets(self):
        return self.window - self.warmup if self.warmup_inside else self.window

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class LossReport:
    iteration: int
    loss: float
    val_rmse: float
    lr: float


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, last_report=None):
        super().__init__(message)
        self.last_report = last_report


@dataclass
class TrainingWindow:
    """One or more forecast windows stacked along the leading axis.

    Grid times are ``(i0 + n) * dt``; ``i0`` indexes the last warm-up
    observation on the integration grid. Padded event slots have ``ev_g == 0``.
    """

    starts: np.ndarray
    i0: np.ndarray
    dt: float
    stride: int
    warm_t: np.ndarray
    warm_y: np.ndarray
    target_t: np.ndarray
    target_y: np.ndarray
    ev_t: np.ndarray
    ev_g: np.ndarray
    ev_m: np.ndarray
    ev_idx: np.ndarray
    uI_warm: np.ndarray
    uI_fore: np.ndarray
    meal_t: np.ndarray
    meal_m: np.ndarray

    def __len__(self):
        return len(self.starts)

    @property
    def n_steps(self):
        return self.uI_fore.shape[1]

    def tau(self):
        n = np.arange(self.n_steps)
        return (self.i0[:, None, None] + n[None, None, :]) * self.dt - self.ev_t[:, :, None]


def _grid_steps(interval, dt):
    steps = interval / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError(f"observation interval {interval} is not a multiple of dt {dt}")
    return int(round(steps))


class WindowSource:
    """Cuts windows out of one split of a dataset at a given integration step."""

    def __init__(self, dataset, split, cfg, dt=None, recorded=True):
        self.ds = dataset
        self.cfg = cfg
        self.dt = float(dt if dt is not None else cfg.dt_train)
        self.stride = _grid_steps(dataset.obs_interval, self.dt)
        self.lo, self.hi = dataset.split(split)
        self.split = split
        meals = sorted(dataset.meals(recorded), key=lambda e: e.t)
        self.meal_t = np.array([e.t for e in meals])
        self.meal_g = np.array([e.g for e in meals])
        self.meal_m = np.array([e.m for e in meals]).reshape(len(meals), 3)
        # insulin on the whole integration grid; window grids are slices of it
        if np.any(np.abs(dataset.t / self.dt - np.round(dataset.t / self.dt)) > 1e-9):
            raise ValueError("observation times must lie on the integration grid")
        n_grid = int(round(dataset.t[-1] / self.dt)) + 1
        self.uI_grid = dataset.uI(np.arange(n_grid) * self.dt)

    def span(self):
        return self.cfg.warmup + self.cfg.n_targets

    def valid_starts(self):
        """Every start index whose warm-up and targets fit inside the split."""
        last = self.hi - self.span()
        if last < self.lo:
            raise ValueError(
                f"split {self.split!r} has {self.hi - self.lo} observations; "
                f"a window needs {self.span()}"
            )
        return np.arange(self.lo, last + 1)

    def windows(self, starts, n_targets=None):
        cfg = self.cfg
        starts = np.asarray(starts, dtype=int)
        F = cfg.warmup
        L = cfg.n_targets if n_targets is None else int(n_targets)
        t, y = self.ds.t, self.ds.y
        if starts.size and (starts.min() < 0 or starts.max() + F + L > len(t)):
            raise IndexError("window runs past the end of the data")
        warm_idx = starts[:, None] + np.arange(F)
        tgt_idx = starts[:, None] + F + np.arange(L)
        t0 = t[starts + F - 1]
        i0 = np.round(t0 / self.dt).astype(int)
        N = L * self.stride
        Nw = (F - 1) * self.stride

        t_end = t0 + N * self.dt
        first = np.searchsorted(self.meal_t, t0 - cfg.support, side="left")
        last = np.searchsorted(self.meal_t, t_end + FUTURE_LEAD, side="right")
        E = int(max((last - first).max(initial=0), 1))
        idx = first[:, None] + np.arange(E)
        on = idx < last[:, None]
        idx = np.where(on, idx, 0)
        if len(self.meal_t):
            ev_t = np.where(on, self.meal_t[idx], -1e6)
            ev_g = np.where(on, self.meal_g[idx], 0.0)
            ev_m = np.where(on[..., None], self.meal_m[idx], 0.0)
        else:
            ev_t = np.full((len(starts), E), -1e6)
            ev_g = np.zeros((len(starts), E))
            ev_m = np.zeros((len(starts), E, 3))

        iw = (i0 - Nw)[:, None] + np.arange(Nw)
        iF = i0[:, None] + np.arange(N)
        return TrainingWindow(
            starts=starts,
            i0=i0,
            dt=self.dt,
            stride=self.stride,
            warm_t=t[warm_idx],
            warm_y=y[warm_idx],
            target_t=t[tgt_idx],
            target_y=y[tgt_idx],
            ev_t=ev_t,
            ev_g=ev_g,
            ev_m=ev_m,
            ev_idx=np.where(on, idx, -1),
            meal_t=self.meal_t,
            meal_m=self.meal_m,
            uI_warm=self.uI_grid[iw],
            uI_fore=self.uI_grid[np.minimum(iF, len(self.uI_grid) - 1)],
        )


def mse_loss(predicted, observed):
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if predicted.shape != observed.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {observed.shape}")
    if predicted.size == 0:
        raise ValueError("mse_loss needs at least one value")
    return float(np.mean((predicted - observed) ** 2))


def lr_schedule(iteration, cfg):
    """Linear ramp to the peak over ``ramp`` iterations, then a half cosine to zero."""
    if not 0 <= iteration < cfg.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations})")
    if iteration < cfg.ramp:
        return cfg.lr_peak * (iteration + 1) / cfg.ramp
    span = cfg.iterations - cfg.ramp
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * (iteration - cfg.ramp) / span))


def _event_rates(window, model):
    """Glucose appearance ``(B, N)`` and its vector-Jacobian product.

    Overlapping windows see the same meal at the same grid times, so the model
    is evaluated once per distinct (meal, grid index) pair and scattered back.
    """
    B, E = window.ev_idx.shape
    N = window.n_steps
    k = window.i0[:, None] + np.arange(N)
    span = int(k.max()) + 1 if k.size else 1
    valid = np.broadcast_to((window.ev_idx >= 0)[:, :, None], (B, E, N))
    keys = window.ev_idx[:, :, None].astype(np.int64) * span + k[:, None, :]
    uniq, inv = np.unique(keys[valid], return_inverse=True)
    meal = uniq // span
    tau = (uniq % span) * window.dt - window.meal_t[meal]
    rate, vjp = model.unit_rate_with_vjp(tau, window.meal_m[meal])
    unit = np.zeros((B, E, N))
    unit[valid] = rate[inv]
    uG = np.einsum("be,ben->bn", window.ev_g, unit)

    def uG_vjp(d_uG):
        cot = window.ev_g[:, :, None] * d_uG[:, None, :]
        cot_u = np.bincount(inv, weights=cot[valid], minlength=len(uniq))
        return vjp(cot_u)

    return uG, uG_vjp


def control_uG(window, model):
    """Glucose appearance on each window's forecast grid, shape ``(B, N)``."""
    return _event_rates(window, model)[0]


def initial_states(window, params):
    """G-forced warm-up estimate of the state at each window's last warm-up time."""
    B = len(window)
    guess = np.column_stack([window.warm_y[:, 0], np.zeros(B), np.full(B, params.Ib)])
    X, I = forced_batch(params, window.uI_warm, guess, window.dt)
    return np.column_stack([window.warm_y[:, -1], X, I])


def _rollout(window, model, params):
    x0 = initial_states(window, params)
    uG, uG_vjp = _event_rates(window, model)
    try:
        states = euler_batch(params, x0, uG, window.uI_fore, window.dt)
    except BlowUpError as exc:
        ids = ", ".join(str(s) for s in window.starts[:5])
        raise BlowUpError(f"forecast blew up for window start(s) {ids}: {exc}", exc.step) from exc
    return states, uG, uG_vjp


def forecast_window(window, model, params, cfg=None):
    """Predicted glucose at every target time, shape ``(B, L)``."""
    states, _, _ = _rollout(window, model, params)
    return states[:, window.stride :: window.stride, 0]


def grad_loss(window, model, params, cfg=None):
    """Batch MSE and its exact gradient with respect to ``model.theta``.

    The reverse sweep differentiates the discrete Euler map; the warm-up
    estimate depends only on data and is held constant.
    """
    states, _, uG_vjp = _rollout(window, model, params)
    B, L = window.target_y.shape
    s = window.stride
    pred = states[:, s::s, 0]
    resid = pred - window.target_y
    loss = float(np.mean(resid**2))
    dpred = 2.0 * resid / resid.size

    dt = window.dt
    c1, c2, c3, c4 = params.c1, params.c2, params.c3, params.c4
    N = window.n_steps
    lam_G = np.zeros(B)
    lam_X = np.zeros(B)
    lam_I = np.zeros(B)
    d_uG = np.empty((B, N))
    for n in range(N, 0, -1):
        if n % s == 0:
            lam_G = lam_G + dpred[:, n // s - 1]
        d_uG[:, n - 1] = dt * lam_G
        G, X = states[:, n - 1, 0], states[:, n - 1, 1]
        lam_G, lam_X, lam_I = (
            lam_G * (1.0 - dt * (c1 + X)),
            lam_X * (1.0 - dt * c2) - dt * G * lam_G,
            lam_I * (1.0 - dt * c4) + dt * c3 * lam_X,
        )
    return loss, uG_vjp(d_uG)


def adam_step(state, theta, grad, lr, cfg=None):
    """Bias-corrected Adam; returns ``(new_state, new_theta)`` without mutating inputs."""
    b1 = cfg.beta1 if cfg else 0.9
    b2 = cfg.beta2 if cfg else 0.999
    eps = cfg.eps if cfg else 1e-8
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, step), theta


def sample_minibatch(source, cfg, rng):
    """Start indices drawn uniformly, with replacement, from all valid positions."""
    starts = source.valid_starts()
    pick = rng.integers(0, len(starts), size=cfg.batch_size)
    return source.windows(starts[pick])


def pooled_rmse(source, model, params, starts=None, chunk=256):
    if starts is None:
        starts = source.valid_starts()
    sq, count = 0.0, 0
    for k in range(0, len(starts), chunk):
        w = source.windows(starts[k : k + chunk])
        pred = forecast_window(w, model, params)
        sq += float(np.sum((pred - w.target_y) ** 2))
        count += pred.size
    return math.sqrt(sq / count)


def train(dataset, family, params, cfg, recorded=True, callback=None):
    """Fit one absorption family; returns ``(best_model, reports)``.

    Patient parameters stay fixed. Validation RMSE is measured every
    ``eval_every`` iterations and at the end, and the parameters with the
    lowest validation RMSE seen (including the initial ones) are returned.
    """
    cfg = cfg.for_family(family)
    rng = np.random.default_rng(cfg.seed)
    model = initial_model(family, seed=cfg.seed)
    if cfg.iterations == 0:
        return model, []
    train_src = WindowSource(dataset, "train", cfg, recorded=recorded)
    val_src = WindowSource(dataset, "val", cfg, recorded=recorded)
    val_starts = val_src.valid_starts()

    theta = model.theta
    state = AdamState.zeros(theta.size)
    best_rmse = pooled_rmse(val_src, model, params, val_starts)
    best_theta = theta.copy()
    reports = []
    last_ok = None
    for it in range(cfg.iterations):
        lr = lr_schedule(it, cfg)
        batch = sample_minibatch(train_src, cfg, rng)
        try:
            loss, grad = grad_loss(batch, model, params, cfg)
        except BlowUpError as exc:
            raise TrainingDivergedError(f"iteration {it}: {exc}", last_ok) from exc
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}", last_ok)
        state, theta = adam_step(state, theta, grad, lr, cfg)
        model = model.with_theta(theta)
        val = float("nan")
        if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
            try:
                val = pooled_rmse(val_src, model, params, val_starts)
            except BlowUpError:
                val = float("inf")
            if val < best_rmse:
                best_rmse, best_theta = val, theta.copy()
            log.info("%s it=%d loss=%.4f val_rmse=%.4f lr=%.4g", family, it, loss, val, lr)
        report = LossReport(it, loss, val, lr)
        reports.append(report)
        last_ok = report
        if callback is not None:
            callback(report)
    return model.with_theta(best_theta), reports


def write_log(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss_mgdl2", "val_rmse_mgdl", "lr"])
        for r in reports:
            val = "" if math.isnan(r.val_rmse) else repr(r.val_rmse)
            w.writerow([r.iteration, repr(r.loss), val, repr(r.lr)])
