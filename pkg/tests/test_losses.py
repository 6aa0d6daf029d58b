import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sigmoid
from epg_pricing.core import ActionInterval, ConfigError
from epg_pricing.losses import (
    DirectSums,
    GlmLogLikLoss,
    LeastSquaresLoss,
    QuadraticSums,
    SegmentMoments,
    check_subgaussian_compatibility,
)
from epg_pricing.models import GlmSpec, LogisticLink, SegmentAffineKernel, glm_constants

IV = ActionInterval(0.2, 1.2)


def glm_loss(n_segments=2, W=2.0, interval=IV):
    link = LogisticLink()
    c1, c2 = glm_constants(link, W)
    return GlmLogLikLoss(GlmSpec(SegmentAffineKernel(n_segments), link), W, c1, c2, interval=interval)


class NullKernel:
    d = 2
    n_segments = 1

    def features(self, x, a):
        return np.zeros(2)


def fd_hessian(loss, theta, x, a, y, h=1e-5):
    d = len(theta)
    H = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        H[:, k] = (loss.terms(theta + e, x, a, y)[1] - loss.terms(theta - e, x, a, y)[1]) / (2 * h)
    return H


def test_gradient_shift_between_responses():
    loss = glm_loss()
    theta = np.array([0.0, 0.0, 1.0, -2.0])
    psi = loss.kernel.features(0, 0.7)
    g0 = loss.terms(theta, 0, 0.7, 0.0)[1]
    g1 = loss.terms(theta, 0, 0.7, 1.0)[1]
    assert np.allclose(g0 - g1, 2 * loss.c1 / loss.c2 * psi, rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(-0.7, 0.7), beta=st.floats(-1, 1), a=st.floats(0.2, 1.2), y=st.sampled_from([0.0, 1.0]))
def test_hessian_inside_range(alpha, beta, a, y):
    loss = glm_loss(1)
    theta = np.array([alpha, beta])
    w = alpha + beta * a
    s = sigmoid(w)
    psi = np.array([1.0, a])
    expected = 2 * loss.c1 / loss.c2 * s * (1 - s) * np.outer(psi, psi)
    _, _, H = loss.terms(theta, 0, a, y)
    assert np.allclose(H, expected, atol=1e-14)
    assert np.allclose(fd_hessian(loss, theta, 0, a, y), expected, atol=1e-6)


def test_null_kernel_row_has_no_gradient():
    link = LogisticLink()
    c1, c2 = glm_constants(link, 2.0)
    loss = GlmLogLikLoss(GlmSpec(NullKernel(), link), 2.0, c1, c2)
    _, g, H = loss.terms(np.array([1.0, 2.0]), 0, 0.5, 1.0)
    assert not g.any() and not H.any()


def test_information_unit_row():
    loss = glm_loss(1, interval=None)
    scale = 2 * loss.c1**2 / loss.c2
    assert np.allclose(loss.information(0, 0.0), scale * np.diag([1.0, 0.0]), rtol=0, atol=0)


def test_information_closed_form():
    loss = glm_loss(1, interval=None)
    c1, c2 = glm_constants(LogisticLink(), 2.0)
    expected = np.array([[1, 0.5], [0.5, 0.25]]) * (2 * c1 * c1 / c2)
    assert np.allclose(loss.information(0, 0.5), expected, rtol=1e-15, atol=0)
    assert loss.information(0, 0.5) == pytest.approx(c1 * (c1 / c2) * 2 * np.array([[1, 0.5], [0.5, 0.25]]))


@given(x=st.integers(0, 1), a=st.floats(0.2, 1.2))
def test_information_trace(x, a):
    loss = glm_loss()
    psi = loss.kernel.features(x, a)
    assert np.trace(loss.information(x, a)) == pytest.approx(2 * loss.c1**2 / loss.c2 * psi @ psi, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(
    theta=st.lists(st.floats(-10, 10), min_size=4, max_size=4),
    x=st.integers(0, 1),
    a=st.floats(0.2, 1.2),
    y=st.sampled_from([0.0, 1.0]),
)
def test_glm_hessian_dominates_information(theta, x, a, y):
    loss = glm_loss()
    _, _, H = loss.terms(np.array(theta), x, a, y)
    assert np.linalg.eigvalsh(H - loss.information(x, a))[0] >= -1e-9
    assert np.linalg.eigvalsh(H)[0] >= -1e-9


def ls_loss(c1=0.8, c2=1.25, dom=0.8):
    return LeastSquaresLoss(SegmentAffineKernel(2), 0.0, 1.0, c1, c2, dom)


def test_least_squares_perfect_fit():
    loss = ls_loss()
    theta = np.array([0.1, 0.5, 0.3, 0.2])
    y = 0.1 + 0.5 * 0.6
    value, grad, _ = loss.terms(theta, 0, 0.6, y)
    assert value == pytest.approx(0.0, abs=1e-30)
    assert np.allclose(grad, 0.0, atol=1e-15)


@given(y=st.floats(0, 1), a=st.floats(0.2, 1.2))
def test_least_squares_hessian_ignores_response(y, a):
    loss = ls_loss()
    psi = loss.kernel.features(1, a)
    _, _, H = loss.terms(np.zeros(4), 1, a, y)
    assert np.allclose(H, loss.C1 * np.outer(psi, psi))
    assert np.linalg.eigvalsh(H - loss.information(1, a))[0] >= -1e-9


@settings(max_examples=50, deadline=None)
@given(theta=st.lists(st.floats(-3, 3), min_size=4, max_size=4), x=st.integers(0, 1),
       a=st.floats(0.2, 1.2), y=st.floats(0, 1))
def test_least_squares_gradient_finite_difference(theta, x, a, y):
    loss = ls_loss()
    theta = np.array(theta)
    _, g, _ = loss.terms(theta, x, a, y)
    h = 1e-5
    fd = np.array([(loss.terms(theta + h * e, x, a, y)[0] - loss.terms(theta - h * e, x, a, y)[0]) / (2 * h)
                   for e in np.eye(4)])
    assert np.linalg.norm(fd - g) <= 1e-6 * max(np.linalg.norm(g), 1e-3)


def test_least_squares_degenerate_scale_rejected():
    with pytest.raises(ConfigError, match="strictly below"):
        LeastSquaresLoss(SegmentAffineKernel(1), 0.0, 2.0, 0.5, 1.0, 0.5)


def test_least_squares_rejects_response_out_of_bounds():
    with pytest.raises(ConfigError):
        ls_loss().terms(np.zeros(4), 0, 0.5, 1.5)


def test_shipped_gaussian_constants_recomputed(gauss_env):
    # second, plain-arithmetic derivation of the least-squares constants
    cfg = gauss_env.config.loss
    lo, hi = gauss_env.config.model.response_bounds
    c1, c2, dom = cfg.c1, cfg.c2, cfg.dominating_scale
    gap = 1 / c1 - (hi - lo)
    C1 = 8 / (c2 * (hi - lo) ** 2) * gap
    loss = gauss_env.loss
    assert loss.C1 == pytest.approx(C1, rel=1e-14)
    a = 0.73
    psi = np.array([1.0, a])
    assert np.allclose(loss.information(0, a), C1 * gap * dom * np.outer(psi, psi), rtol=1e-14)
    assert loss.sandwich_violations(gauss_env.model.theta_star, 1, np.linspace(0.2, 1.2, 11)) == []


def test_subgaussian_zero_lambda(logit_env):
    lhs, rhs, ok = check_subgaussian_compatibility(logit_env.model, logit_env.loss, 0, 0.7, np.zeros(4))
    assert lhs == pytest.approx(1.0) and rhs == 1.0 and ok


@pytest.mark.parametrize("norm", [0.1, 1.0, 10.0])
def test_subgaussian_along_feature_direction(logit_env, norm):
    env = logit_env
    rng = np.random.default_rng(int(norm * 10))
    for _ in range(1000):
        x = int(rng.integers(2))
        a = rng.uniform(env.interval.lo, env.interval.hi)
        psi = env.loss.kernel.features(x, a)
        lam = norm * rng.choice([-1, 1]) * psi / np.linalg.norm(psi)
        assert check_subgaussian_compatibility(env.model, env.loss, x, a, lam)[2]


def fill(acc, rng, n, support=(0.0, 1.0)):
    for _ in range(n):
        x = int(rng.integers(2))
        a = float(rng.uniform(IV.lo, IV.hi))
        y = float(rng.choice(support)) if support else float(rng.uniform())
        acc.add(x, a, acc.loss.statistic(x, y))
    return acc


@pytest.mark.parametrize("scale", [0.3, 1.0, 3.0])
def test_segment_moments_match_direct_pass(scale):
    loss = glm_loss()
    rng = np.random.default_rng(1)
    moments = fill(SegmentMoments(loss, IV), rng, 500)
    direct = DirectSums(loss)
    for row, s in zip(moments.Psi, moments.stats):
        segment = int(row[2] == 1)
        direct.add(segment, row[2 * segment + 1], s)
    for _ in range(20):
        theta = rng.normal(0, scale, 4)
        f1, g1, H1 = moments.evaluate(theta)
        f2, g2, H2 = direct.evaluate(theta)
        assert f1 == pytest.approx(f2, rel=1e-10)
        assert np.allclose(g1, g2, rtol=1e-9, atol=1e-9)
        assert np.allclose(H1, H2, rtol=1e-9, atol=1e-9)
        assert moments.evaluate(theta, need_derivatives=False) == pytest.approx(f2, rel=1e-10)


def test_segment_moments_falls_back_outside_range():
    loss = glm_loss()
    moments = fill(SegmentMoments(loss, IV), np.random.default_rng(2), 50)
    theta = np.array([5.0, 0.0, 0.0, 0.0])
    f, g, H = moments.evaluate(theta)
    assert moments.fallbacks == 1
    assert f == pytest.approx(loss.batch(theta, moments.Psi, moments.stats)[0], rel=1e-14)


def test_quadratic_sums_match_direct_pass():
    loss = ls_loss()
    rng = np.random.default_rng(3)
    quad = fill(QuadraticSums(loss), rng, 300, support=None)
    for _ in range(10):
        theta = rng.normal(0, 1, 4)
        f1, g1, H1 = quad.evaluate(theta)
        f2, g2, H2 = loss.batch(theta, quad.Psi, quad.stats)
        assert f1 == pytest.approx(f2, rel=1e-9)
        assert np.allclose(g1, g2, atol=1e-9) and np.allclose(H1, H2, atol=1e-12)
