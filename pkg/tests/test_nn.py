import math

import mpmath
import numpy as np
import pytest

from hybridglucose import nn


def naive_forward(params, x):
    """Scalar-loop evaluation of the 4-64-64-1 network."""
    def phi(v):
        return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))

    act = list(x)
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        nxt = []
        for i in range(w.shape[0]):
            total = b[i]
            for j in range(w.shape[1]):
                total += w[i, j] * act[j]
            nxt.append(total)
        act = nxt if layer == len(params.weights) - 1 else [phi(v) for v in nxt]
    return act[0]


def random_params(rng, scale=0.5):
    theta = rng.normal(scale=scale, size=nn.n_params())
    return nn.MLPParams.from_flat(theta)


def zero_params():
    return nn.MLPParams.from_flat(np.zeros(nn.n_params()))


def test_gelu_values():
    assert nn.gelu(0.0) == 0.0
    assert abs(nn.gelu(10.0) - 10.0) < 1e-6
    mpmath.mp.dps = 30
    cdf = mpmath.quad(lambda s: mpmath.exp(-s * s / 2) / mpmath.sqrt(2 * mpmath.pi), [-mpmath.inf, 0, 1])
    assert abs(nn.gelu(1.0) - float(cdf)) < 1e-10


def test_gelu_grad_matches_central_difference():
    x = np.linspace(-6, 6, 101)
    h = 1e-6
    fd = (nn.gelu(x + h) - nn.gelu(x - h)) / (2 * h)
    assert np.allclose(nn.gelu_grad(x), fd, atol=1e-8)


def test_forward_trivial_networks():
    p = zero_params()
    assert nn.forward(p, np.ones(4)) == 0.0
    theta = np.zeros(nn.n_params())
    theta[-1] = 1.7  # final bias
    p = nn.MLPParams.from_flat(theta)
    for x in np.random.default_rng(0).normal(size=(5, 4)):
        assert nn.forward(p, x) == 1.7


def test_forward_matches_naive_loops():
    rng = np.random.default_rng(1)
    for _ in range(3):
        p = random_params(rng)
        x = rng.normal(size=4)
        ref = naive_forward(p, x)
        assert abs(nn.forward(p, x) - ref) <= 1e-12 * max(1.0, abs(ref))


def test_forward_batch_consistent_with_single():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    xs = rng.normal(size=(7, 4))
    batch = nn.forward(p, xs)
    assert np.allclose(batch, [nn.forward(p, x) for x in xs], rtol=1e-14, atol=1e-14)


def test_backward_zero_cotangent():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    g, gx = nn.backward(p, rng.normal(size=4), 0.0)
    assert not g.any() and not gx.any()


def test_backward_zero_network_input_gradient():
    g, gx = nn.backward(zero_params(), np.array([0.3, 0.1, 0.2, 0.7]), 1.0)
    assert not gx.any()


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, scale=0.3)
    x = rng.normal(size=4)
    theta = p.flat()
    grad, gx = nn.backward(p, x, 1.0)
    h = 1e-5
    # a few coordinates from every layer plus random ones
    bounds = np.cumsum([0] + [i * o + o for i, o in zip(nn.LAYER_SIZES[:-1], nn.LAYER_SIZES[1:])])
    coords = np.concatenate([rng.integers(lo, hi, size=3) for lo, hi in zip(bounds[:-1], bounds[1:])])
    coords = np.concatenate([coords, rng.integers(0, theta.size, size=100 if seed == 0 else 10)])
    for i in coords:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (nn.forward(nn.MLPParams.from_flat(tp), x) - nn.forward(nn.MLPParams.from_flat(tm), x)) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * max(abs(fd), abs(grad[i]), 1e-6)
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd = (nn.forward(p, x + e) - nn.forward(p, x - e)) / (2 * h)
        assert abs(fd - gx[j]) <= 1e-4 * max(abs(fd), abs(gx[j]), 1e-6)


def test_directional_derivative_converges_second_order():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    x = rng.normal(size=4)
    d = rng.normal(size=4)
    _, gx = nn.backward(p, x, 1.0)
    exact = gx @ d
    errs = []
    for h in (1e-2, 5e-3):
        fd = (nn.forward(p, x + h * d) - nn.forward(p, x - h * d)) / (2 * h)
        errs.append(abs(fd - exact))
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_init_deterministic_and_scaled():
    a, b = nn.init(7), nn.init(7)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), nn.init(8).flat())
    assert all(not bias.any() for bias in a.biases)
    for layer, n_in in enumerate(nn.LAYER_SIZES[:-1]):
        if nn.LAYER_SIZES[layer + 1] == 1:
            continue
        stds = [nn.init(s).weights[layer].std() for s in range(10)]
        expected = 1.0 / math.sqrt(3.0 * n_in)
        assert abs(np.mean(stds) - expected) < 0.2 * expected


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(9)
    p = random_params(rng)
    x = rng.normal(size=(10, 4))
    assert np.array_equal(nn.forward(p, x), nn.forward(p, x))


def test_flat_roundtrip_and_shape_checks():
    p = nn.init(0)
    assert np.array_equal(nn.MLPParams.from_flat(p.flat()).flat(), p.flat())
    with pytest.raises(ValueError):
        nn.MLPParams.from_flat(np.zeros(10))
    bad = list(p.weights)
    bad[0] = np.full_like(bad[0], np.nan)
    with pytest.raises(ValueError):
        nn.MLPParams(tuple(bad), p.biases)


def test_scaling_spec_validation():
    with pytest.raises(ValueError):
        nn.ScalingSpec(input_scale=(0.0, 1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        nn.ScalingSpec(output_scale=-1.0)
    s = nn.ScalingSpec()
    assert nn.ScalingSpec.from_dict(s.to_dict()) == s
