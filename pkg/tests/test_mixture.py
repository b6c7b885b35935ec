import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldmix import mixture as mx


def random_instance(seed, k=3, m=40):
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((k, m))
    ctf = rng.uniform(0.3, 1.0, m)
    preds = rng.standard_normal((k, m))
    s = rng.standard_normal(k)
    return obs, ctf, preds, s


# ---------------------------------------------------------------------------
# class_probs
# ---------------------------------------------------------------------------

def test_class_probs_uniform():
    assert np.allclose(mx.class_probs([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


@given(st.floats(min_value=-50, max_value=50))
@settings(max_examples=30, deadline=None)
def test_class_probs_shift_invariance(c):
    s = np.array([0.3, -1.2, 2.4])
    assert np.allclose(mx.class_probs(s + c), mx.class_probs(s), atol=1e-12)


def test_class_probs_log_ratios():
    s = np.log([1.0, 2.0, 3.0])
    assert np.allclose(mx.class_probs(s), [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_class_probs_sum_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = mx.class_probs(rng.uniform(-100, 100, 5))
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p > 0)


# ---------------------------------------------------------------------------
# image_nll
# ---------------------------------------------------------------------------

def test_k1_reduces_to_single_residual():
    obs, ctf, preds, _ = random_instance(1, k=1)
    nll, r, gamma = mx.image_nll(obs, ctf, preds, np.zeros(1), sigma=0.2)
    assert nll == pytest.approx(r[0], abs=1e-12)
    assert gamma[0] == 1.0


def test_equal_residuals_uniform_scores():
    obs, ctf, _, _ = random_instance(2, k=3)
    preds = np.repeat(obs[:1] * 0.0, 3, axis=0)
    obs_equal = np.repeat(obs[:1], 3, axis=0)
    nll, r, gamma = mx.image_nll(obs_equal, ctf, preds, np.zeros(3), sigma=0.3)
    assert np.allclose(r, r[0])
    assert nll == pytest.approx(r[0], abs=1e-12)
    assert np.allclose(gamma, 1 / 3, atol=1e-12)


def test_nll_matches_extended_precision_oracle():
    obs, ctf, preds, s = random_instance(3, k=3)
    sigma = 0.17
    nll, r, gamma = mx.image_nll(obs, ctf, preds, s, sigma)
    with mpmath.workdps(50):
        m = obs.shape[1]
        rs = []
        for kk in range(3):
            acc = mpmath.mpf(0)
            for j in range(m):
                dd = mpmath.mpf(float(obs[kk, j])) - mpmath.mpf(float(ctf[j])) * mpmath.mpf(
                    float(preds[kk, j])
                )
                acc += dd * dd
            rs.append(acc / (2 * mpmath.mpf(sigma) ** 2 * m))
        ses = [mpmath.exp(mpmath.mpf(float(v))) for v in s]
        tot = sum(ses)
        mix = sum(mpmath.exp(-rs[kk]) * ses[kk] / tot for kk in range(3))
        oracle = -mpmath.log(mix)
    assert nll == pytest.approx(float(oracle), abs=1e-10)


def test_sigma_scaling():
    obs, ctf, preds, s = random_instance(4)
    r1 = mx.residuals(obs, ctf, preds, 0.1)
    r2 = mx.residuals(obs, ctf, preds, 0.2)
    assert np.allclose(r1, 4 * r2, rtol=1e-12)


def test_sigma_validation():
    obs, ctf, preds, s = random_instance(5)
    with pytest.raises(ValueError):
        mx.image_nll(obs, ctf, preds, s, sigma=0.0)


@given(st.integers(min_value=0, max_value=5000))
@settings(max_examples=40, deadline=None)
def test_nll_bounds(seed):
    obs, ctf, preds, s = random_instance(seed)
    nll, r, gamma = mx.image_nll(obs, ctf, preds, s, sigma=0.4)
    upper = np.min(r - mx.log_softmax(s))
    lower = np.min(r) - math.log(len(r))
    assert nll <= upper + 1e-9
    assert nll >= lower - 1e-9
    assert gamma.sum() == pytest.approx(1.0, abs=1e-12)


def test_gamma_invariant_to_common_residual_shift():
    obs, ctf, preds, s = random_instance(6)
    r = mx.residuals(obs, ctf, preds, 0.3)
    _, g1 = mx.mixture_nll(r, s)
    _, g2 = mx.mixture_nll(r + 123.4, s)
    assert np.allclose(g1, g2, atol=1e-12)


# ---------------------------------------------------------------------------
# nll_backward
# ---------------------------------------------------------------------------

def test_backward_stationary_scores_under_symmetry():
    obs, ctf, _, _ = random_instance(7, k=3)
    obs_equal = np.repeat(obs[:1], 3, axis=0)
    preds = np.zeros_like(obs_equal)
    grad_s, *_ = mx.nll_backward(obs_equal, ctf, preds, np.zeros(3), sigma=0.3)
    assert np.max(np.abs(grad_s)) < 1e-12


def test_backward_scores_match_finite_differences():
    obs, ctf, preds, s = random_instance(8)
    sigma = 0.25
    grad_s, *_ = mx.nll_backward(obs, ctf, preds, s, sigma)
    eps = 1e-6
    for j in range(len(s)):
        sp, sm = s.copy(), s.copy()
        sp[j] += eps
        sm[j] -= eps
        np_ = mx.image_nll(obs, ctf, preds, sp, sigma)[0]
        nm = mx.image_nll(obs, ctf, preds, sm, sigma)[0]
        assert grad_s[j] == pytest.approx((np_ - nm) / (2 * eps), abs=1e-6)


def test_backward_preds_match_finite_differences():
    obs, ctf, preds, s = random_instance(9, k=2, m=6)
    sigma = 0.5
    _, grad_preds, grad_obs, *_ = mx.nll_backward(obs, ctf, preds, s, sigma)
    eps = 1e-6
    for kk in range(2):
        for j in range(6):
            pp, pm = preds.copy(), preds.copy()
            pp[kk, j] += eps
            pm[kk, j] -= eps
            fdiff = (
                mx.image_nll(obs, ctf, pp, s, sigma)[0] - mx.image_nll(obs, ctf, pm, s, sigma)[0]
            ) / (2 * eps)
            assert grad_preds[kk, j] == pytest.approx(fdiff, rel=1e-5, abs=1e-8)
            op, om = obs.copy(), obs.copy()
            op[kk, j] += eps
            om[kk, j] -= eps
            fdiff = (
                mx.image_nll(op, ctf, preds, s, sigma)[0] - mx.image_nll(om, ctf, preds, s, sigma)[0]
            ) / (2 * eps)
            assert grad_obs[kk, j] == pytest.approx(fdiff, rel=1e-5, abs=1e-8)


def test_backward_softmax_saturation():
    obs, ctf, _, _ = random_instance(10, k=3)
    preds = obs.copy()  # class 0 fits perfectly
    preds[0] = obs[0]
    preds[1] = obs[1] + 10.0  # huge residuals for classes 1, 2
    preds[2] = obs[2] + 10.0
    _, grad_preds, _, r, gamma, _ = mx.nll_backward(obs, ctf, preds, np.zeros(3), sigma=0.1)
    assert r[1] - r[0] > 40 and r[2] - r[0] > 40
    assert np.max(np.abs(grad_preds[1])) < 1e-12
    assert np.max(np.abs(grad_preds[2])) < 1e-12


# ---------------------------------------------------------------------------
# total_loss / predict_class
# ---------------------------------------------------------------------------

def test_total_loss_identical_images():
    assert mx.total_loss([2.5, 2.5, 2.5]) == pytest.approx(2.5, abs=1e-15)


def test_total_loss_permutation_invariance():
    rng = np.random.default_rng(11)
    nlls = rng.uniform(0, 100, 64)
    idx = np.arange(64)
    perm = rng.permutation(64)
    assert mx.total_loss(nlls, idx) == pytest.approx(
        mx.total_loss(nlls[perm], idx[perm]), abs=1e-12
    )


def test_total_loss_matches_naive_loop():
    rng = np.random.default_rng(12)
    nlls = list(rng.uniform(0, 10, 17))
    acc = 0.0
    for v in nlls:
        acc += v
    assert mx.total_loss(nlls) == pytest.approx(acc / 17, rel=1e-12)


def test_total_loss_empty_raises():
    with pytest.raises(ValueError):
        mx.total_loss([])


def test_predict_class():
    assert mx.predict_class([0.0, 5.0, -1.0]) == 1
    s = np.array([0.1, 0.7, 0.3])
    assert mx.predict_class(s) == mx.predict_class(s + 3.0) == mx.predict_class(s * 7.0)
    assert mx.predict_class([2.0, 2.0, 2.0]) == 0
