"""Bergman minimal model and fixed-step Euler integration.

    dG/dt = -c1 (G - Gb) - G X + uG
    dX/dt = -c2 X + c3 (I - Ib)
    dI/dt = -c4 (I - Ib) + uI

States are kept as ``(G, X, I)``; arrays of states have the component axis last.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, NamedTuple

import numpy as np


class BlowUpError(FloatingPointError):
    """Integration produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class PatientParams:
    """Rate constants (1/min) and basal levels of the minimal model.

    c3 is in 1/min per uU/ml. The defaults are not physiological textbook
    values; they were chosen so that meals sized for a 50 dl distribution
    volume keep glucose inside (20, 450) mg/dl, and so that X and I forget
    their initial condition within a 45 minute warm-up.
    """

    c1: float = 0.2
    c2: float = 0.2
    c3: float = 1.5e-4
    c4: float = 0.3
    Gb: float = 90.0
    Ib: float = 8.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"PatientParams.{f.name} must be positive and finite, got {v}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class PhysioState(NamedTuple):
    G: float
    X: float
    I: float


class ControlSample(NamedTuple):
    uG: float
    uI: float


def observe(state):
    """Observation operator H: (G, X, I) -> (G, 0, 0)."""
    if isinstance(state, PhysioState):
        return PhysioState(state.G, 0.0, 0.0)
    arr = np.array(state, dtype=float)
    arr[..., 1:] = 0.0
    return arr


@dataclass(frozen=True)
class Trajectory:
    t0: float
    dt: float
    states: np.ndarray  # (n, 3)

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.states))

    @property
    def final(self):
        return PhysioState(*map(float, self.states[-1]))

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return PhysioState(*map(float, self.states[i]))


def bergman_rhs(state, params, control):
    """Time derivative of ``(G, X, I)`` under the minimal model."""
    G, X, I = state
    uG, uI = control
    values = (G, X, I, uG, uI)
    if not all(math.isfinite(v) for v in values):
        raise BlowUpError(f"non-finite input to bergman_rhs: state={tuple(state)}, control={tuple(control)}")
    dG = -params.c1 * (G - params.Gb) - G * X + uG
    dX = -params.c2 * X + params.c3 * (I - params.Ib)
    dI = -params.c4 * (I - params.Ib) + uI
    return PhysioState(dG, dX, dI)


def n_steps(t0, t_end, dt):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < t0:
        raise ValueError("t_end must not precede t0")
    return int(round((t_end - t0) / dt))


def euler_arrays(params, uG, uI, x0, dt):
    """Forward Euler with pre-sampled controls.

    ``uG[n]`` and ``uI[n]`` are the controls at the left end of step ``n``.
    Returns an ``(len(uG) + 1, 3)`` array of states.
    """
    c1, c2, c3, c4, Gb, Ib = params.c1, params.c2, params.c3, params.c4, params.Gb, params.Ib
    G, X, I = (float(v) for v in x0)
    uG = np.asarray(uG, dtype=float).tolist()
    uI = np.asarray(uI, dtype=float).tolist()
    out = np.empty((len(uG) + 1, 3))
    Gs, Xs, Is = [G], [X], [I]
    for n, (ug, ui) in enumerate(zip(uG, uI)):
        dG = -c1 * (G - Gb) - G * X + ug
        dX = -c2 * X + c3 * (I - Ib)
        dI = -c4 * (I - Ib) + ui
        G += dt * dG
        X += dt * dX
        I += dt * dI
        Gs.append(G)
        Xs.append(X)
        Is.append(I)
    out[:, 0] = Gs
    out[:, 1] = Xs
    out[:, 2] = Is
    bad = ~np.isfinite(out).all(axis=1)
    if bad.any():
        step = int(np.argmax(bad)) - 1
        raise BlowUpError(f"integration blew up at step {step}", step=step)
    return out


def euler_batch(params, x0, uG, uI, dt):
    """Vectorised Euler over a batch of independent runs.

    ``x0`` is ``(B, 3)``, controls are ``(B, N)``. Returns ``(B, N + 1, 3)``.
    """
    x0 = np.asarray(x0, dtype=float)
    B, N = uG.shape
    out = np.empty((B, N + 1, 3))
    G, X, I = x0[:, 0].copy(), x0[:, 1].copy(), x0[:, 2].copy()
    out[:, 0] = x0
    p = params
    for n in range(N):
        dG = -p.c1 * (G - p.Gb) - G * X + uG[:, n]
        dX = -p.c2 * X + p.c3 * (I - p.Ib)
        dI = -p.c4 * (I - p.Ib) + uI[:, n]
        G = G + dt * dG
        X = X + dt * dX
        I = I + dt * dI
        out[:, n + 1, 0] = G
        out[:, n + 1, 1] = X
        out[:, n + 1, 2] = I
    if not np.isfinite(out).all():
        bad = ~np.isfinite(out).all(axis=(0, 2))
        step = int(np.argmax(bad)) - 1
        raise BlowUpError(f"batched integration blew up at step {step}", step=step)
    return out


def integrate(params, control: Callable[[float], ControlSample], x0, t0, t_end, dt):
    """Integrate from ``t0`` to ``t_end`` with controls sampled at step starts."""
    n = n_steps(t0, t_end, dt)
    times = t0 + dt * np.arange(n)
    samples = [control(float(t)) for t in times]
    uG = [s[0] for s in samples]
    uI = [s[1] for s in samples]
    states = euler_arrays(params, uG, uI, x0, dt)
    return Trajectory(float(t0), float(dt), states)


def integrate_forced(params, control, warmup, x_init_guess=None, dt=0.1):
    """Estimate the state at the last warm-up time by G-forcing.

    ``warmup`` is a sequence of ``(t, G)`` observations. X and I are integrated
    forward while the G entering the right-hand side is the linear interpolant
    of the observations. The returned state carries the last observed G.
    ``x_init_guess`` defaults to ``(first observation, 0, Ib)``; its G is ignored.
    """
    warmup = [(float(t), float(g)) for t, g in warmup]
    if not warmup:
        raise ValueError("integrate_forced needs at least one warm-up observation")
    times = np.array([t for t, _ in warmup])
    obs = np.array([g for _, g in warmup])
    if np.any(np.diff(times) <= 0):
        raise ValueError("warm-up observation times must be strictly increasing")
    if x_init_guess is None:
        x_init_guess = (obs[0], 0.0, params.Ib)
    _, X, I = (float(v) for v in x_init_guess)
    t0, t_end = times[0], times[-1]
    n = n_steps(t0, t_end, dt)
    for k in range(n):
        t = t0 + k * dt
        G = float(np.interp(t, times, obs))
        uI = control(t)[1]
        dX = -params.c2 * X + params.c3 * (I - params.Ib)
        dI = -params.c4 * (I - params.Ib) + uI
        X += dt * dX
        I += dt * dI
        # G is forced, but a non-finite value still signals bad data
        if not (math.isfinite(X) and math.isfinite(I) and math.isfinite(G)):
            raise BlowUpError(f"forced integration blew up at step {k}", step=k)
    return PhysioState(float(obs[-1]), X, I)


def forced_batch(params, uI, x_init, dt):
    """Batched warm-up: integrate X and I only, ``uI`` is ``(B, N)``.

    The G forcing does not enter the X and I equations, so only the insulin
    control drives the estimate.
    """
    X = np.asarray(x_init[:, 1], dtype=float).copy()
    I = np.asarray(x_init[:, 2], dtype=float).copy()
    p = params
    for n in range(uI.shape[1]):
        dX = -p.c2 * X + p.c3 * (I - p.Ib)
        dI = -p.c4 * (I - p.Ib) + uI[:, n]
        X = X + dt * dX
        I = I + dt * dI
    return X, I
