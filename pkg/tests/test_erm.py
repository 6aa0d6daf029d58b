import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from conftest import sigmoid
from epg_pricing.core import ActionInterval, ConfigError, Observation
from epg_pricing.erm import (
    ErmState,
    estimation_error_bound,
    exploration_margin,
    self_normalized_check,
    uniform_error_bound,
)
from epg_pricing.losses import GlmLogLikLoss, LeastSquaresLoss
from epg_pricing.models import GlmSpec, LogisticLink, SegmentAffineKernel, glm_constants, link_extension_btilde

IV = ActionInterval(0.2, 1.2)


def glm_loss(n_segments=1, W=2.0):
    link = LogisticLink()
    c1, c2 = glm_constants(link, W)
    return GlmLogLikLoss(GlmSpec(SegmentAffineKernel(n_segments), link), W, c1, c2, interval=IV)


def synthetic(theta_star, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(IV.lo, IV.hi, n)
    y = (rng.random(n) < sigmoid(theta_star[0] + theta_star[1] * a)).astype(float)
    return a, y


def fitted_state(loss, a, y, x=None):
    state = ErmState(loss)
    for t, (ai, yi) in enumerate(zip(a, y), 1):
        state.ingest(Observation(t, 0 if x is None else x[t - 1], float(ai), float(yi), True))
    return state


def test_no_observations_gives_zero():
    theta, report = ErmState(glm_loss()).fit()
    assert np.array_equal(theta, np.zeros(2))
    assert report.converged


def test_single_observation_is_stationary():
    state = fitted_state(glm_loss(), [0.7], [1.0])
    theta, _ = state.fit(theta0=np.array([3.0, -3.0]))
    _, g, _ = state.objective(theta)
    assert np.linalg.norm(g) <= 1e-8


def test_matches_brute_force_minimiser():
    loss = glm_loss()
    a, y = synthetic([1.0, -1.5], 50, seed=4)

    def objective(th):
        w = th[0] + th[1] * a
        bt, _, _ = link_extension_btilde(LogisticLink(), 2.0, w)
        return loss.scale * np.sum(bt - y * w) + 0.5 * th @ th

    grid = np.arange(-3, 3.0001, 0.02)
    best = min(((objective(np.array([u, v])), u, v) for u in grid for v in grid))
    ref = optimize.minimize(objective, [best[1], best[2]], method="Nelder-Mead",
                            options={"xatol": 1e-11, "fatol": 1e-15, "maxiter": 10000}).x
    theta, _ = fitted_state(loss, a, y).fit()
    assert np.linalg.norm(theta - ref) <= 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 200))
def test_warm_and_cold_start_agree(seed, n):
    loss = glm_loss(2)
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n)
    a, y = rng.uniform(IV.lo, IV.hi, n), rng.integers(0, 2, n).astype(float)
    warm = ErmState(loss)
    for t in range(n):
        warm.ingest(Observation(t + 1, int(x[t]), float(a[t]), float(y[t]), True))
        if t % 7 == 0:
            warm.fit()
    theta_warm, _ = warm.fit()
    theta_cold, _ = fitted_state(loss, a, y, x=x).fit(theta0=np.zeros(4))
    assert np.linalg.norm(theta_warm - theta_cold) <= 1e-7


def test_design_matrix_after_one_and_two_ingests():
    loss = glm_loss()
    state = ErmState(loss).ingest(Observation(1, 0, 0.5, 1.0, True))
    assert np.allclose(state.V, 2 * np.eye(2) + loss.information(0, 0.5), rtol=0, atol=1e-15)
    state.ingest(Observation(2, 0, 0.5, 0.0, False))
    assert np.allclose(state.V, 2 * np.eye(2) + 2 * loss.information(0, 0.5), rtol=0, atol=1e-15)


def test_design_matrix_floor_and_recompute():
    loss = glm_loss(2)
    rng = np.random.default_rng(0)
    state = ErmState(loss)
    for t in range(100):
        state.ingest(Observation(t, int(rng.integers(2)), float(rng.uniform(0.2, 1.2)), 1.0, True))
    assert np.linalg.eigvalsh(state.V)[0] >= 2 - 1e-12
    assert np.allclose(state.V, state.recompute_V(), atol=1e-12)


def test_least_squares_fit_is_ridge_solution():
    loss = LeastSquaresLoss(SegmentAffineKernel(1), 0.0, 1.0, 0.8, 1.25, 0.8)
    rng = np.random.default_rng(2)
    a = rng.uniform(0.2, 1.2, 40)
    y = np.clip(0.9 - 0.5 * a + 0.05 * rng.normal(size=40), 0, 1)
    theta, _ = fitted_state(loss, a, y).fit()
    Psi = np.column_stack([np.ones_like(a), a])
    ref = np.linalg.solve(loss.C1 * Psi.T @ Psi + np.eye(2), loss.C1 * Psi.T @ y)
    assert np.allclose(theta, ref, atol=1e-9)


def test_estimation_bound_closed_form_at_identity():
    bound = estimation_error_bound(2 * np.eye(2), [1.0, 0.0], 0.5)
    assert bound == pytest.approx(4 * (4 * math.log(2) + 0.5), rel=1e-14)


def test_estimation_bound_decreases_with_delta():
    V = np.array([[5.0, 1.0], [1.0, 3.0]])
    assert estimation_error_bound(V, [1, 1], 0.1) > estimation_error_bound(V, [1, 1], 0.5)


@pytest.mark.parametrize("delta", [0.0, 1.0, -0.1])
def test_estimation_bound_rejects_bad_delta(delta):
    with pytest.raises(ConfigError):
        estimation_error_bound(2 * np.eye(2), [1, 0], delta)


def test_margin_without_exploration():
    d, delta, C_H = 2, 0.05, 0.01
    L = math.log(2 * d / delta)
    expected = 2 - 2 * C_H * (L + math.sqrt(2 * L))
    assert exploration_margin(0.0, 1, delta, 1e-3, C_H, d) == pytest.approx(expected, rel=1e-14)


def test_margin_ignores_exploration_without_floor():
    assert exploration_margin(0.0, 50, 0.1, 0.0, 0.01, 2) == exploration_margin(40.0, 50, 0.1, 0.0, 0.01, 2)


@given(eps=st.floats(0, 100), extra=st.floats(0, 100))
def test_margin_monotone_in_exploration(eps, extra):
    assert exploration_margin(eps + extra, 200, 0.05, 0.01, 0.02, 4) >= exploration_margin(eps, 200, 0.05, 0.01, 0.02, 4)


def test_uniform_bound_absent_when_margin_not_positive():
    assert uniform_error_bound(0.0, 1000, 0.1, 1e-3, 1.0, 2, 1.0) is None


def test_uniform_bound_decreases_with_delta():
    args = dict(eps_sum=100.0, T=500, rho_H=0.05, C_H=0.001, d=2, theta_star_norm_sq=2.0)
    assert uniform_error_bound(delta=0.01, **args) > uniform_error_bound(delta=0.1, **args)


def test_uniform_bound_blows_up_as_margin_vanishes():
    T, delta, rho, C_H, d = 100, 0.1, 0.01, 0.01, 2
    zero_at = -(exploration_margin(0.0, T, delta, rho, C_H, d)) / rho
    near = uniform_error_bound(zero_at + 1e-9, T, delta, rho, C_H, d, 1.0)
    far = uniform_error_bound(zero_at + 100, T, delta, rho, C_H, d, 1.0)
    assert near > 1e6 * far


def test_self_normalized_check_without_data():
    lhs, rhs, ok = self_normalized_check(ErmState(glm_loss()), [1.0, -1.0], 0.05)
    assert lhs == 0.0 and ok
    assert rhs == pytest.approx(2 * math.log(2) + 2 * math.log(20))
