import math

import numpy as np
import pytest

import oracles
from updraft import loss, shash
from updraft.errors import ValidationError
from updraft.loss import LossConfig, WeightPolicy


def finite_diff(raw, y, cfg, h=1e-5):
    fd = np.zeros_like(raw)
    for idx in np.ndindex(raw.shape):
        a = raw.copy()
        b = raw.copy()
        a[idx] += h
        b[idx] -= h
        fd[idx] = (loss.nll(loss.transform(a), y, cfg)[0] - loss.nll(loss.transform(b), y, cfg)[0]) / (2 * h)
    return fd


def test_transform_examples():
    p = loss.transform(np.array([1.5, 0.0, -0.3, 0.0]))
    assert float(p.mu) == 1.5 and float(p.gamma) == -0.3
    assert float(p.sigma) == 1.0 and float(p.tau) == 1.0
    assert float(loss.transform(np.array([0.0, 10 * math.e, 0.0, 10 * math.e])).sigma) == pytest.approx(math.e, rel=1e-15)


def test_transform_no_overflow():
    p = loss.transform(np.array([0.0, 700.0, 0.0, 700.0]))
    assert np.isfinite(p.sigma)
    assert float(p.sigma) == pytest.approx(math.exp(700 / (10 * math.e)), rel=1e-14)
    assert np.isinf(loss.naive_exp_transform(710.0))


def test_transform_rejects_non_finite():
    with pytest.raises(ValidationError):
        loss.transform(np.array([0.0, np.nan, 0.0, 0.0]))


def test_epsilon_floor():
    p = shash.ShashParams(0.0, 1.0, 0.0, 1.0)
    value, per_pixel = loss.nll(p, np.array(100.0))
    assert value == pytest.approx(7 * math.log(10), abs=1e-9)
    assert value == pytest.approx(16.1181, abs=1e-4)


def test_mode_loss():
    value, _ = loss.nll(shash.ShashParams(0.0, 1.0, 0.0, 1.0), np.array(0.0))
    assert value == pytest.approx(-math.log(1 / math.sqrt(2 * math.pi) + 1e-7), abs=1e-12)
    assert value == pytest.approx(0.918939, abs=1e-6)


def test_weighting_elementwise():
    # at the mode pdf = 1/(sigma*sqrt(2 pi)); pick sigma so that -log(pdf + eps) == 2
    sigma = 1.0 / ((math.exp(-2.0) - 1e-7) * math.sqrt(2 * math.pi))
    p = shash.ShashParams(12.0, sigma, 0.0, 1.0)
    cfg = LossConfig(weight_policy=WeightPolicy(threshold=10.0, weight_above=5.0))
    assert loss.nll(p, np.array(12.0))[0] == pytest.approx(2.0, abs=1e-12)
    assert loss.nll(p, np.array(12.0), cfg)[0] == pytest.approx(10.0, abs=1e-11)


def test_weight_policy_threshold_inclusive():
    w = WeightPolicy(10.0, 3.0).weights(np.array([9.99, 10.0, 11.0]))
    assert w.tolist() == [1.0, 3.0, 3.0]


def test_shape_mismatch():
    p = loss.transform(np.zeros((4, 2, 2)))
    with pytest.raises(ValidationError):
        loss.nll(p, np.zeros((3, 3)))


def test_finite_everywhere(rng):
    raw = rng.normal(0, 50, size=(4, 1000, 1000))
    y = rng.normal(0, 100, size=(1000, 1000))
    value, per_pixel = loss.nll(loss.transform(raw), y)
    assert np.isfinite(value)
    assert np.all(per_pixel <= -math.log(1e-7) + 1e-12)


def test_matches_log_pdf_when_eps_negligible(rng):
    raw = rng.normal(0, 0.3, size=(4, 50))
    p = loss.transform(raw)
    y = shash.quantile(p, rng.uniform(0.2, 0.8, size=50))
    assert loss.nll(p, y)[0] == pytest.approx(-np.mean(shash.log_pdf(p, y)), abs=1e-6)


def test_unit_weight_is_unweighted(rng):
    raw = rng.normal(size=(4, 30))
    y = rng.normal(5, 5, size=30)
    a = loss.nll(loss.transform(raw), y)[1]
    b = loss.nll(loss.transform(raw), y, LossConfig(weight_policy=WeightPolicy(3.0, 1.0)))[1]
    assert np.array_equal(a, b)


def test_gradient_zero_at_mode():
    _, g = loss.nll_grad(np.array([3.0, 0.0, 0.0, 0.0]), np.array(3.0))
    assert g[0] == 0.0


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale > 0, np.abs(a - b) / np.where(scale > 0, scale, 1.0), 0.0)


def test_gradient_matches_extended_precision_differences(rng):
    cfg = LossConfig(weight_policy=WeightPolicy(threshold=2.0, weight_above=3.0))
    worst = 0.0
    for _ in range(100):
        raw = np.array([rng.normal(0, 3), rng.normal(0, 15), rng.normal(0, 0.7), rng.normal(0, 10)])
        y = np.array(raw[0] + math.exp(raw[1] * loss.SLOPE) * rng.normal(0, 1.5))
        _, g = loss.nll_grad(raw, y, cfg)
        fd = oracles.nll_central_diff(raw, y, threshold=2.0, weight_above=3.0)
        worst = max(worst, relative_error(g, fd).max())
    assert worst < 1e-4


def test_batch_gradient_matches_finite_differences(rng):
    # checks the mean reduction over pixels; moderate values keep float64 differences accurate
    cfg = LossConfig(weight_policy=WeightPolicy(threshold=1.0, weight_above=2.0))
    raw = np.stack([rng.normal(0, 1, (3, 3)), rng.normal(0, 5, (3, 3)), rng.normal(0, 0.5, (3, 3)), rng.normal(0, 5, (3, 3))])
    y = raw[0] + rng.normal(0, 1, (3, 3))
    _, g = loss.nll_grad(raw, y, cfg)
    fd = finite_diff(raw, y, cfg)
    assert np.all(np.abs(g - fd) <= 1e-8 + 1e-5 * np.abs(fd))


def test_gradient_zero_where_likelihood_underflows():
    _, g = loss.nll_grad(np.zeros((4, 1)), np.array([1e3]))
    assert np.all(g == 0.0)


def test_doubling_weight_doubles_gradient(rng):
    raw = rng.normal(size=(4, 40))
    y = rng.uniform(0, 10, 40)
    g1 = loss.nll_grad(raw, y, LossConfig(weight_policy=WeightPolicy(5.0, 2.0)))[1]
    g2 = loss.nll_grad(raw, y, LossConfig(weight_policy=WeightPolicy(5.0, 4.0)))[1]
    above = y >= 5.0
    assert np.allclose(g2[:, above], 2 * g1[:, above], rtol=1e-14, atol=0)
    assert np.array_equal(g2[:, ~above], g1[:, ~above])
