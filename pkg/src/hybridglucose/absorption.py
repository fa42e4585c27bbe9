"""Meal events and absorption-rate models.

Every model is linear in the meal's glucose content, so models expose a
*unit* rate ``r(tau, m)`` (1/min) of the elapsed time ``tau = t - t_i`` and the
covariates; the absorption rate of event i is ``g_i * r(t - t_i, m_i)``.
Trainable models carry an unconstrained parameter vector ``theta`` and a
vector-Jacobian product of their unit rate with respect to it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import ScalingSpec, sigmoid, softplus

SMOOTH_WINDOW = 5.0
SMOOTH_POINTS = 50
NEURAL_HORIZON = 480.0
MIN_BUMP_GAP = 1e-6


@dataclass(frozen=True)
class MealEvent:
    """A meal at ``t`` (min) with covariates ``m`` and glucose content ``g`` (mg/dl)."""

    t: float
    m: tuple[float, float, float]
    g: float

    def __post_init__(self):
        if not self.g >= 0:
            raise ValueError(f"meal glucose content must be >= 0, got {self.g}")
        m = tuple(float(v) for v in self.m)
        if len(m) != 3 or min(m) < 0:
            raise ValueError(f"meal covariate must be 3 nonnegative weights, got {self.m}")
        object.__setattr__(self, "m", m)

    def to_dict(self):
        return {"t": self.t, "m": list(self.m), "g": self.g}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["t"]), tuple(d["m"]), float(d["g"]))


@dataclass(frozen=True)
class SquareParams:
    w: float = 60.0
    k: float = 0.5

    def __post_init__(self):
        if not (self.w > 0 and self.k > 0):
            raise ValueError(f"square width and sharpness must be positive: {self}")


@dataclass(frozen=True)
class BumpParams:
    b1: float = 0.02
    b2: float = 0.05

    def __post_init__(self):
        if not (0 < self.b1 < self.b2):
            raise ValueError(f"bump rates need 0 < b1 < b2, got b1={self.b1}, b2={self.b2}")

    @property
    def b3(self):
        return 1.0 / self.b1 - 1.0 / self.b2


@dataclass(frozen=True)
class AbsorptionTemplate:
    b1: float
    b2: float
    d: float

    def __post_init__(self):
        if not (0 < self.b1 < self.b2) or self.d < 0:
            raise ValueError(f"invalid template {self}")


# regular, fast and slow absorption
DEFAULT_TEMPLATES = (
    AbsorptionTemplate(0.04, 0.09, 5.0),
    AbsorptionTemplate(0.08, 0.13, 5.0),
    AbsorptionTemplate(0.03, 0.04, 30.0),
)


def _bump_unit(tau, b1, b2):
    tau = np.asarray(tau, dtype=float)
    pos = np.maximum(tau, 0.0)
    val = (np.exp(-b1 * pos) - np.exp(-b2 * pos)) / (1.0 / b1 - 1.0 / b2)
    return np.where(tau >= 0, val, 0.0)


def _square_unit(tau, w, k):
    tau = np.asarray(tau, dtype=float)
    return (sigmoid(k * tau) - sigmoid(k * (tau - w))) / w


def smooth_rate(raw, t, window=SMOOTH_WINDOW, points=SMOOTH_POINTS):
    """Mean of ``raw`` over ``points`` evenly spaced times in ``[t - window, t]``.

    ``raw`` must accept numpy arrays. ``t`` may itself be an array.
    """
    offsets = np.linspace(-window, 0.0, points)
    t = np.asarray(t, dtype=float)
    return np.asarray(raw(t[..., None] + offsets)).mean(axis=-1)


def square_rate(t, e, p):
    return e.g * _square_unit(t - e.t, p.w, p.k)


def bump_rate(t, e, p):
    return e.g * _bump_unit(t - e.t, p.b1, p.b2)


def _smoothed_bump_unit(tau, b1, b2, d, window=SMOOTH_WINDOW, points=SMOOTH_POINTS):
    """``smooth_rate`` of a delayed unit bump, in closed form away from its onset.

    Once every smoothing point lies inside the support, the average of each
    exponential factors into ``exp(-b s) * mean(exp(-b offset))``. Points
    whose window straddles the onset fall back to direct averaging.
    """
    tau = np.asarray(tau, dtype=float)
    s = tau - d
    offsets = np.linspace(-window, 0.0, points)
    a1 = np.mean(np.exp(-b1 * offsets))
    a2 = np.mean(np.exp(-b2 * offsets))
    b3 = 1.0 / b1 - 1.0 / b2
    inside = s - window >= 0
    pos = np.where(inside, s, 0.0)
    out = np.where(inside, (a1 * np.exp(-b1 * pos) - a2 * np.exp(-b2 * pos)) / b3, 0.0)
    edge = (s >= 0) & ~inside
    if np.any(edge):
        s_edge = s[edge]
        out[edge] = _bump_unit(s_edge[:, None] + offsets, b1, b2).mean(axis=1)
    return out


def _mixture_unit_raw(tau, m, templates):
    m = np.asarray(m, dtype=float)
    out = 0.0
    for j, tpl in enumerate(templates):
        out = out + m[..., j] * _bump_unit(tau - tpl.d, tpl.b1, tpl.b2)
    return out


def template_mixture_rate(t, e, templates=DEFAULT_TEMPLATES):
    raw = lambda s: _mixture_unit_raw(s - e.t, e.m, templates)  # noqa: E731
    return e.g * smooth_rate(raw, t)


def neural_rate(t, e, net, scaling=ScalingSpec(), horizon=NEURAL_HORIZON):
    model = NeuralModel(net, scaling, horizon)
    return e.g * model.unit_rate(np.asarray(t, dtype=float) - e.t, np.asarray(e.m))


class AbsorptionModel:
    """Base class; subclasses define ``unit_rate`` and, if trainable, ``theta``."""

    family = "base"
    trainable = True

    def unit_rate(self, tau, m):
        raise NotImplementedError

    def rate(self, t, e):
        return e.g * self.unit_rate(np.asarray(t, dtype=float) - e.t, np.asarray(e.m))

    @property
    def theta(self):
        raise NotImplementedError

    def with_theta(self, theta):
        raise NotImplementedError

    def unit_rate_vjp(self, tau, m, cot):
        """Gradient of ``sum(cot * unit_rate(tau, m))`` with respect to theta."""
        raise NotImplementedError

    def unit_rate_with_vjp(self, tau, m):
        """``unit_rate`` plus a closure mapping a cotangent to the theta gradient."""
        return self.unit_rate(tau, m), lambda cot: self.unit_rate_vjp(tau, m, cot)

    def to_payload(self):
        raise NotImplementedError


def _bcast_m(tau, m):
    m = np.asarray(m, dtype=float)
    return np.broadcast_to(m, np.shape(tau) + (3,))


@dataclass(frozen=True)
class SquareModel(AbsorptionModel):
    """Sigmoid-smoothed square; theta = (log w, log k)."""

    params: SquareParams = field(default_factory=SquareParams)
    family = "square"

    def unit_rate(self, tau, m=None):
        return _square_unit(tau, self.params.w, self.params.k)

    @property
    def theta(self):
        return np.log([self.params.w, self.params.k])

    def with_theta(self, theta):
        w, k = np.exp(np.asarray(theta, dtype=float))
        return SquareModel(SquareParams(float(w), float(k)))

    def unit_rate_vjp(self, tau, m, cot):
        w, k = self.params.w, self.params.k
        tau = np.asarray(tau, dtype=float)
        s1 = sigmoid(k * tau)
        s2 = sigmoid(k * (tau - w))
        ds1 = s1 * (1.0 - s1)
        ds2 = s2 * (1.0 - s2)
        d_w = k * ds2 / w - (s1 - s2) / w**2
        d_k = (ds1 * tau - ds2 * (tau - w)) / w
        return np.array([np.sum(cot * d_w) * w, np.sum(cot * d_k) * k])

    def to_payload(self):
        return {"w": self.params.w, "k": self.params.k}


def _inv_softplus(y):
    return float(y + np.log(-np.expm1(-y)))


@dataclass(frozen=True)
class BumpModel(AbsorptionModel):
    """Difference of exponentials; theta = (log b1, softplus^-1(b2 - b1))."""

    params: BumpParams = field(default_factory=BumpParams)
    family = "bump"

    def unit_rate(self, tau, m=None):
        return _bump_unit(tau, self.params.b1, self.params.b2)

    @property
    def theta(self):
        b1, b2 = self.params.b1, self.params.b2
        return np.array([np.log(b1), _inv_softplus(b2 - b1)])

    def with_theta(self, theta):
        t0, t1 = np.asarray(theta, dtype=float)
        b1 = float(np.exp(t0))
        # keep b2 distinguishable from b1 so b3 does not cancel to zero
        gap = max(float(softplus(t1)), MIN_BUMP_GAP * b1)
        return BumpModel(BumpParams(b1, b1 + gap))

    def unit_rate_vjp(self, tau, m, cot):
        b1, b2 = self.params.b1, self.params.b2
        b3 = self.params.b3
        tau = np.asarray(tau, dtype=float)
        on = tau >= 0
        pos = np.maximum(tau, 0.0)
        e1 = np.exp(-b1 * pos)
        e2 = np.exp(-b2 * pos)
        diff = e1 - e2
        d_b1 = np.where(on, -pos * e1 / b3 + diff / (b3**2 * b1**2), 0.0)
        d_b2 = np.where(on, pos * e2 / b3 - diff / (b3**2 * b2**2), 0.0)
        g1 = np.sum(cot * d_b1)
        g2 = np.sum(cot * d_b2)
        t1 = _inv_softplus(b2 - b1)
        return np.array([(g1 + g2) * b1, g2 * float(sigmoid(t1))])

    def to_payload(self):
        return {"b1": self.params.b1, "b2": self.params.b2}


@dataclass(frozen=True)
class TemplateMixtureModel(AbsorptionModel):
    """Ground-truth generator: smoothed convex mixture of delayed unit bumps."""

    templates: tuple[AbsorptionTemplate, ...] = DEFAULT_TEMPLATES
    smooth: bool = True
    family = "template"
    trainable = False

    def unit_rate(self, tau, m):
        tau = np.asarray(tau, dtype=float)
        m = _bcast_m(tau, m)
        if not self.smooth:
            return _mixture_unit_raw(tau, m, self.templates)
        out = np.zeros(tau.shape)
        for j, tpl in enumerate(self.templates):
            out = out + m[..., j] * _smoothed_bump_unit(tau, tpl.b1, tpl.b2, tpl.d)
        return out

    def to_payload(self):
        return {
            "templates": [[t.b1, t.b2, t.d] for t in self.templates],
            "smooth": self.smooth,
        }


@dataclass(frozen=True, eq=False)
class NeuralModel(AbsorptionModel):
    """Shared network over (scaled elapsed time, covariates), truncated at ``horizon``."""

    net: nn.MLPParams
    scaling: ScalingSpec = ScalingSpec()
    horizon: float = NEURAL_HORIZON
    family = "neural"

    def _inputs(self, tau, m):
        scale = np.asarray(self.scaling.input_scale)
        x = np.concatenate([tau[:, None], m], axis=1)
        return x / scale

    def _support(self, tau):
        return (tau >= 0) & (tau < self.horizon)

    def unit_rate(self, tau, m):
        tau = np.asarray(tau, dtype=float)
        m = _bcast_m(tau, m)
        out = np.zeros(tau.shape)
        on = self._support(tau)
        if on.any():
            raw = nn.forward(self.net, self._inputs(tau[on], m[on]))
            out[on] = self.scaling.output_scale * softplus(raw)
        return out

    @property
    def theta(self):
        return self.net.flat()

    def with_theta(self, theta):
        return NeuralModel(nn.MLPParams.from_flat(theta), self.scaling, self.horizon)

    def unit_rate_vjp(self, tau, m, cot):
        return self.unit_rate_with_vjp(tau, m)[1](cot)

    def unit_rate_with_vjp(self, tau, m):
        tau = np.asarray(tau, dtype=float)
        m = _bcast_m(tau, m)
        out = np.zeros(tau.shape)
        on = self._support(tau)
        if not on.any():
            return out, lambda cot: np.zeros(self.net.size)
        x = self._inputs(tau[on], m[on])
        raw, cache = nn.forward(self.net, x, return_cache=True)
        out[on] = self.scaling.output_scale * softplus(raw)
        slope = self.scaling.output_scale * sigmoid(raw)

        def vjp(cot):
            cot = np.broadcast_to(np.asarray(cot, dtype=float), tau.shape)
            grad, _ = nn.backward(self.net, x, cot[on] * slope, cache=cache)
            return grad

        return out, vjp

    def to_payload(self):
        return {
            "layers": [
                {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(self.net.weights, self.net.biases)
            ],
            "scaling": self.scaling.to_dict(),
            "horizon": self.horizon,
        }


def model_from_payload(family, payload):
    if family == "square":
        return SquareModel(SquareParams(float(payload["w"]), float(payload["k"])))
    if family == "bump":
        return BumpModel(BumpParams(float(payload["b1"]), float(payload["b2"])))
    if family == "template":
        tpls = tuple(AbsorptionTemplate(*map(float, row)) for row in payload["templates"])
        return TemplateMixtureModel(tpls, bool(payload.get("smooth", True)))
    if family == "neural":
        weights, biases = [], []
        for layer in payload["layers"]:
            shape = tuple(layer["shape"])
            weights.append(np.asarray(layer["weight"], dtype=float).reshape(shape))
            biases.append(np.asarray(layer["bias"], dtype=float))
        net = nn.MLPParams(tuple(weights), tuple(biases))
        return NeuralModel(net, ScalingSpec.from_dict(payload["scaling"]), float(payload["horizon"]))
    raise ValueError(f"unknown model family {family!r}")


def initial_model(family, seed=0, scaling=None):
    """Starting point for training each family."""
    if family == "square":
        return SquareModel(SquareParams(60.0, 0.5))
    if family == "bump":
        return BumpModel(BumpParams(0.02, 0.05))
    if family == "neural":
        return NeuralModel(nn.init(seed), scaling or ScalingSpec())
    raise ValueError(f"family {family!r} is not trainable")


def total_control_uG(t, events: Sequence[MealEvent], model):
    """Glucose appearance rate: sum of every event's absorption rate at ``t``."""
    t = np.asarray(t, dtype=float)
    total = np.zeros(t.shape)
    for e in events:
        total = total + model.rate(t, e)
    return total if total.ndim else float(total)
