"""Feedforward network 4 -> 64 -> 64 -> 1 with GELU activations.

Forward and reverse passes are written out by hand so the absorption model can
chain them with the integrator adjoint. All routines accept a batch of inputs
with shape ``(n, 4)``; a single 4-vector is promoted to a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

LAYER_SIZES = (4, 64, 64, 1)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=float)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return expit(x)


@dataclass(frozen=True)
class ScalingSpec:
    """How network inputs and outputs are mapped to physical units.

    ``input_scale`` divides each input feature (elapsed minutes, then the three
    covariates). The raw output goes through ``output_transform`` and is then
    multiplied by ``output_scale`` (1/min).
    """

    input_scale: tuple[float, ...] = (240.0, 1.0, 1.0, 1.0)
    output_scale: float = 1.0 / 240.0
    output_transform: str = "softplus"

    def __post_init__(self):
        if len(self.input_scale) != LAYER_SIZES[0]:
            raise ValueError(f"input_scale needs {LAYER_SIZES[0]} entries")
        if not all(s > 0 and np.isfinite(s) for s in self.input_scale):
            raise ValueError("input scales must be positive and finite")
        if not (self.output_scale > 0 and np.isfinite(self.output_scale)):
            raise ValueError("output_scale must be positive and finite")
        if self.output_transform not in ("softplus",):
            raise ValueError(f"unknown output transform {self.output_transform!r}")

    def to_dict(self):
        return {
            "input_scale": list(self.input_scale),
            "output_scale": self.output_scale,
            "output_transform": self.output_transform,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_scale=tuple(float(v) for v in d["input_scale"]),
            output_scale=float(d["output_scale"]),
            output_transform=str(d["output_transform"]),
        )


@dataclass(frozen=True)
class MLPParams:
    """Weights ``W[l]`` of shape ``(out, in)`` and biases ``b[l]`` of shape ``(out,)``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (LAYER_SIZES[layer + 1], LAYER_SIZES[layer])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"layer {layer}: bad shapes {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {layer}: non-finite parameters")

    @property
    def size(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self):
        """Flat view theta: for each layer, row-major W followed by b."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, theta):
        theta = np.asarray(theta, dtype=float)
        weights, biases = [], []
        pos = 0
        for n_in, n_out in zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]):
            weights.append(theta[pos : pos + n_in * n_out].reshape(n_out, n_in).copy())
            pos += n_in * n_out
            biases.append(theta[pos : pos + n_out].copy())
            pos += n_out
        if pos != theta.size:
            raise ValueError(f"expected {pos} parameters, got {theta.size}")
        return cls(tuple(weights), tuple(biases))


def n_params():
    return sum(i * o + o for i, o in zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]))


def init(seed):
    """Fan-in uniform weights, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MLPParams(tuple(weights), tuple(biases))


def _as_batch(inputs):
    x = np.asarray(inputs, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def forward(params, inputs, return_cache=False):
    """Network output before the nonnegativity transform.

    Returns a scalar for a single 4-vector, otherwise an ``(n,)`` array.
    """
    single = np.ndim(inputs) == 1
    x = _as_batch(inputs)
    w1, w2, w3 = params.weights
    b1, b2, b3 = params.biases
    z1 = x @ w1.T + b1
    cdf1 = _cdf(z1)
    h1 = z1 * cdf1
    z2 = h1 @ w2.T + b2
    cdf2 = _cdf(z2)
    h2 = z2 * cdf2
    out = (h2 @ w3.T + b3)[:, 0]
    if single:
        out = out[0]
    if return_cache:
        return out, (x, z1, cdf1, h1, z2, cdf2, h2)
    return out


def _cdf(z):
    return 0.5 * (1.0 + erf(z * _INV_SQRT2))


def _gelu_grad_cached(z, cdf):
    return cdf + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)


def backward(params, inputs, cotangent, cache=None):
    """Reverse pass; returns ``(grad_theta, grad_inputs)``.

    ``cotangent`` matches the shape of ``forward``'s output. The parameter
    gradient is summed over the batch and laid out like ``MLPParams.flat``.
    """
    single = np.ndim(inputs) == 1
    if cache is None:
        _, cache = forward(params, inputs, return_cache=True)
    x, z1, cdf1, h1, z2, cdf2, h2 = cache
    w1, w2, w3 = params.weights
    dout = np.atleast_1d(np.asarray(cotangent, dtype=float))[:, None]

    dw3 = dout.T @ h2
    db3 = dout.sum(axis=0)
    dz2 = (dout @ w3) * _gelu_grad_cached(z2, cdf2)
    dw2 = dz2.T @ h1
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2) * _gelu_grad_cached(z1, cdf1)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    dx = dz1 @ w1

    grad_theta = np.concatenate(
        [dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3]
    )
    return grad_theta, (dx[0] if single else dx)
