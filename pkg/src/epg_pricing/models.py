"""Parametric response laws, expected reward and its action gradient.

The flagship law is a Bernoulli acceptance model with logistic link; the
second is a Gaussian response with known noise level. Both are written as
exponential families ``g(y) exp(h(y) w - b(w))`` in a scalar natural
parameter ``w = psi(x, a) @ theta`` where ``psi`` is the per-segment affine
kernel ``onehot(x) (x) [1, a]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .core import (
    ActionInterval,
    ConfigError,
    NumericalError,
    RandomStream,
    SegmentSpace,
    golden_section_max,
)

QUAD_ORDER = 64
QUAD_TOL = 1e-8


class SegmentAffineKernel:
    """``psi(x, a) = onehot(x) (x) [1, a]``, a 1 x d row with ``d = 2 |X|``."""

    def __init__(self, n_segments: int):
        self.n_segments = int(n_segments)
        self.d = 2 * self.n_segments
        self.m = 1

    def features(self, x: int, a: float) -> np.ndarray:
        row = np.zeros(self.d)
        row[2 * x] = 1.0
        row[2 * x + 1] = a
        return row

    def d_features(self, x: int, a: float) -> np.ndarray:
        row = np.zeros(self.d)
        row[2 * x + 1] = 1.0
        return row

    def batch(self, xs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=int)
        out = np.zeros((xs.shape[0], self.d))
        rows = np.arange(xs.shape[0])
        out[rows, 2 * xs] = 1.0
        out[rows, 2 * xs + 1] = actions
        return out

    def natural(self, theta: np.ndarray, x: int, a):
        return theta[2 * x] + theta[2 * x + 1] * a

    def d_natural(self, theta: np.ndarray, x: int) -> float:
        return theta[2 * x + 1]

    def op_norm(self, x: int, a):
        return np.sqrt(1.0 + np.asarray(a) ** 2)


class LogisticLink:
    """Bernoulli family: ``b(w) = log(1 + e^w)``, counting measure on {0, 1}."""

    name = "logistic"
    measure = "counting"
    support = (0.0, 1.0)
    curvature_max = 0.25

    def value(self, w):
        return np.logaddexp(0.0, w)

    def d1(self, w):
        return expit(w)

    def d2(self, w):
        s = expit(w)
        return s * (1.0 - s)

    def derivatives(self, w):
        """``(b, b', b'')`` in one pass, stable for large ``|w|``."""
        w = np.asarray(w, dtype=float)
        e = np.exp(-np.abs(w))
        inv = 1.0 / (1.0 + e)
        s = np.where(w >= 0, inv, e * inv)
        return np.maximum(w, 0.0) + np.log1p(e), s, s * (1.0 - s)

    def statistic(self, y):
        return y

    def base(self, y):
        return np.ones_like(np.asarray(y, dtype=float))

    def mean(self, w):
        return expit(w)


class GaussianLink:
    """Gaussian family with known standard deviation; ``w`` is the mean."""

    name = "gaussian"
    measure = "lebesgue"
    support = None

    def __init__(self, sd: float):
        if not sd > 0:
            raise ConfigError(f"model.noise_sd must be > 0, got {sd!r}")
        self.sd = float(sd)
        self.curvature_max = 1.0 / self.sd**2

    def value(self, w):
        return np.asarray(w) ** 2 / (2.0 * self.sd**2)

    def d1(self, w):
        return np.asarray(w) / self.sd**2

    def d2(self, w):
        return np.full_like(np.asarray(w, dtype=float), 1.0 / self.sd**2)

    def derivatives(self, w):
        return self.value(w), self.d1(w), self.d2(w)

    def statistic(self, y):
        return np.asarray(y) / self.sd**2

    def base(self, y):
        y = np.asarray(y, dtype=float)
        return np.exp(-(y**2) / (2.0 * self.sd**2)) / math.sqrt(2.0 * math.pi * self.sd**2)

    def mean(self, w):
        return w


@dataclass(frozen=True)
class GlmSpec:
    kernel: SegmentAffineKernel
    link: object

    @property
    def d(self) -> int:
        return self.kernel.d

    @property
    def m(self) -> int:
        return 1


def link_extension_btilde(link, W: float, w):
    """Strongly convex extension of ``b`` outside ``[-W, W]``.

    Inside the range it equals ``b``; outside, the second-order Taylor
    polynomial at the nearest endpoint, so value, slope and curvature are
    continuous at ``+-W``. Vectorised; returns ``(value, grad, hess)``.
    """
    w = np.asarray(w, dtype=float)
    wc = np.clip(w, -W, W)
    delta = w - wc
    b0, b1, b2 = link.value(wc), link.d1(wc), link.d2(wc)
    value = b0 + b1 * delta + 0.5 * b2 * delta**2
    grad = b1 + b2 * delta
    return value, grad, b2


def glm_constants(link, W: float, n_grid: int = 2001) -> tuple[float, float]:
    """Curvature bounds ``(c1, c2)``: ``c1 = min b''`` on ``[-W, W]``, ``c2 = max b''`` globally."""
    if not W > 0:
        raise ConfigError(f"model.W must be > 0, got {W!r}")
    grid = np.linspace(-W, W, n_grid)
    curv = link.d2(grid)
    i = int(np.argmin(curv))
    step = grid[1] - grid[0]
    lo, hi = max(-W, grid[i] - step), min(W, grid[i] + step)
    _, neg = golden_section_max(lambda w: -float(link.d2(w)), lo, hi, tol=1e-12)
    c1 = min(float(curv[i]), -neg)
    if c1 <= 0:
        raise ConfigError("link not strongly convex on the natural-parameter range (c1 <= 0)")

    wide = np.linspace(-50.0 * max(1.0, W), 50.0 * max(1.0, W), 200001)
    grid_max = float(np.max(link.d2(wide)))
    c2 = getattr(link, "curvature_max", None)
    if c2 is None:
        c2 = grid_max
    elif grid_max > c2 * (1 + 1e-12):
        raise ConfigError(f"declared curvature bound {c2} exceeded on grid ({grid_max})")
    return c1, float(c2)


def check_normalization(link, ws) -> float:
    """Largest ``|integral g e^{h w} - e^{b(w)}|`` relative error over probe values ``ws``."""
    worst = 0.0
    for w in np.atleast_1d(ws):
        if link.measure == "counting":
            ys = np.asarray(link.support)
            total = float(np.sum(link.base(ys) * np.exp(link.statistic(ys) * w)))
        else:
            from scipy.integrate import quad

            mu = link.mean(w)
            span = 12.0 * link.sd
            total = quad(
                lambda y: float(link.base(y) * np.exp(link.statistic(y) * w - link.value(w))),
                mu - span, mu + span, epsabs=1e-13, epsrel=1e-12, limit=200,
            )[0]
            worst = max(worst, abs(total - 1.0))
            continue
        worst = max(worst, abs(total / math.exp(float(link.value(w))) - 1.0))
    return worst


@dataclass(frozen=True)
class RewardFunction:
    """Known instantaneous reward ``r(x, a, y)`` with its partial derivatives."""

    evaluate: Callable
    d_action: Callable | None
    d_response: Callable | None
    sup_bound: float
    name: str = "custom"


def margin_reward(costs, y_abs_max: float, interval: ActionInterval) -> RewardFunction:
    """Pricing margin ``r = y (a - cost(x))``."""
    cost = np.asarray(costs, dtype=float)
    spread = max(max(abs(interval.hi - c), abs(interval.lo - c)) for c in cost)
    return RewardFunction(
        evaluate=lambda x, a, y: y * (a - cost[x]),
        d_action=lambda x, a, y: y + 0.0 * a,
        d_response=lambda x, a, y: a - cost[x] + 0.0 * y,
        sup_bound=float(y_abs_max * spread),
        name="margin",
    )


def zero_reward() -> RewardFunction:
    return RewardFunction(
        evaluate=lambda x, a, y: 0.0 * (a + y),
        d_action=lambda x, a, y: 0.0 * (a + y),
        d_response=lambda x, a, y: 0.0 * (a + y),
        sup_bound=0.0,
        name="zero",
    )


class ResponseModel:
    """Conditional response law ``pi_theta(dy | x, a)`` with a known truth ``theta_star``."""

    def __init__(
        self,
        glm: GlmSpec,
        theta_star,
        interval: ActionInterval,
        space: SegmentSpace,
        y_bounds: tuple[float, float] | None = None,
        quad_order: int = QUAD_ORDER,
    ):
        self.glm = glm
        self.kernel = glm.kernel
        self.link = glm.link
        self.theta_star = np.array(theta_star, dtype=float)
        if self.theta_star.shape != (glm.d,):
            raise ConfigError(f"model.theta_star must have length {glm.d}, got {self.theta_star.shape[0]}")
        self.interval = interval
        self.space = space
        if len(space) != self.kernel.n_segments:
            raise ConfigError("kernel and segment space disagree on the number of segments")
        self.y_bounds = y_bounds
        if self.link.measure not in ("counting", "lebesgue"):
            raise ConfigError(f"unsupported reference measure {self.link.measure!r}")
        self.quad_order = quad_order
        if self.link.measure == "lebesgue":
            self._nodes = {n: np.polynomial.hermite.hermgauss(n) for n in (quad_order, 2 * quad_order)}

    @property
    def d(self) -> int:
        return self.glm.d

    def sample_response(self, x: int, a: float, rng: RandomStream) -> float:
        """One draw from the true law; consumes exactly one variate."""
        if not self.interval.contains(a):
            raise ConfigError(f"action {a} outside [{self.interval.lo}, {self.interval.hi}]")
        w = float(self.kernel.natural(self.theta_star, x, a))
        if self.link.measure == "counting":
            return 1.0 if rng.uniform() < float(expit(w)) else 0.0
        y = float(self.link.mean(w)) + self.link.sd * rng.normal()
        if self.y_bounds is not None:
            y = min(max(y, self.y_bounds[0]), self.y_bounds[1])
        return y

    def _quad(self, order: int, means):
        z, wts = self._nodes[order]
        ys = np.asarray(means)[..., None] + math.sqrt(2.0) * self.link.sd * z
        return ys, wts / math.sqrt(math.pi)

    def expected_reward_grid(self, theta, reward: RewardFunction, x: int, actions) -> np.ndarray:
        """Expected reward at each of ``actions`` (vectorised)."""
        a = np.asarray(actions, dtype=float)
        w = self.kernel.natural(theta, x, a)
        if self.link.measure == "counting":
            p = expit(w)
            return p * reward.evaluate(x, a, 1.0) + (1.0 - p) * reward.evaluate(x, a, 0.0)
        means = self.link.mean(w)
        vals = []
        for order in (self.quad_order, 2 * self.quad_order):
            ys, qw = self._quad(order, means)
            vals.append(np.sum(reward.evaluate(x, a[..., None], ys) * qw, axis=-1))
        if np.max(np.abs(vals[0] - vals[1])) > QUAD_TOL:
            raise NumericalError("Gauss-Hermite quadrature did not converge (orders 64 vs 128)")
        return vals[0]

    def grad_expected_reward_grid(self, theta, reward: RewardFunction, x: int, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=float)
        w = self.kernel.natural(theta, x, a)
        dw = self.kernel.d_natural(theta, x)
        if self.link.measure == "counting":
            p = expit(w)
            dp = p * (1.0 - p) * dw
            r1, r0 = reward.evaluate(x, a, 1.0), reward.evaluate(x, a, 0.0)
            return p * reward.d_action(x, a, 1.0) + (1.0 - p) * reward.d_action(x, a, 0.0) + dp * (r1 - r0)
        ys, qw = self._quad(self.quad_order, self.link.mean(w))
        dmean = dw  # mean is the natural parameter for the Gaussian law
        aa = a[..., None]
        integrand = reward.d_action(x, aa, ys) + reward.d_response(x, aa, ys) * dmean
        return np.sum(integrand * qw, axis=-1)

    def expected_reward(self, theta, reward: RewardFunction, x: int, a: float) -> float:
        return float(self.expected_reward_grid(theta, reward, x, a))

    def grad_a_expected_reward(self, theta, reward: RewardFunction, x: int, a: float) -> float:
        """Exact action derivative of the expected reward (no sampling)."""
        return float(self.grad_expected_reward_grid(theta, reward, x, a))

    def response_probabilities(self, theta, x: int, a: float) -> tuple[np.ndarray, np.ndarray]:
        """Support points and probabilities for counting-measure laws."""
        if self.link.measure != "counting":
            raise ConfigError("response_probabilities needs a finite-support law")
        p = float(expit(self.kernel.natural(theta, x, a)))
        return np.array([0.0, 1.0]), np.array([1.0 - p, p])

    def containment_violations(self, W: float, n_actions: int = 101) -> list[tuple[str, float, float]]:
        """Probe points where ``|psi(x, a) theta_star| > W``."""
        bad = []
        grid = self.interval.grid(n_actions)
        for x, sid in enumerate(self.space.ids):
            w = self.kernel.natural(self.theta_star, x, grid)
            for a, wv in zip(grid, w):
                if abs(wv) > W:
                    bad.append((sid, float(a), float(wv)))
        return bad


def validate_reward(model: ResponseModel, reward: RewardFunction) -> None:
    """Construction-time differentiability check for the policy-gradient step."""
    if reward.d_action is None:
        raise ConfigError(f"reward {reward.name!r} has no action derivative; policy gradient needs one")
    if model.link.measure == "lebesgue" and reward.d_response is None:
        raise ConfigError(f"reward {reward.name!r} has no response derivative; needed under quadrature")
