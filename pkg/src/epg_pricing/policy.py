"""Tabular pricing policy, exploration kernels, the exploration-rate schedule
and numerical certification of the constants the guarantees depend on."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ActionInterval,
    ConfigError,
    ModelConstants,
    RandomStream,
    SegmentSpace,
    golden_section_max,
    project_action,
)
from .erm import UNIFORM_DELTA_MAX, exploration_margin
from .losses import LossSpec
from .models import ResponseModel, RewardFunction

# Lowest-action-wins grid scan followed by golden refinement.
ORACLE_GRID = 1001
ORACLE_TOL = 1e-10


class Policy:
    """One price per segment, always inside the action interval."""

    def __init__(self, interval: ActionInterval, actions):
        self.interval = interval
        table = np.array(actions, dtype=float).reshape(-1)
        for x, a in enumerate(table):
            if not interval.contains(a):
                raise ConfigError(f"policy.initial: action {a!r} for segment {x} outside [{interval.lo}, {interval.hi}]")
        self.table = table

    def __call__(self, x: int) -> float:
        return float(self.table[x])

    def copy(self) -> "Policy":
        return Policy(self.interval, self.table.copy())


def action_gradients(model: ResponseModel, theta, reward: RewardFunction, actions) -> np.ndarray:
    """``d r_theta(x, a_x) / da`` for every segment ``x`` at its own action ``a_x``."""
    return np.array([model.grad_a_expected_reward(theta, reward, x, float(a)) for x, a in enumerate(actions)])


def pg_update(policy: Policy, theta, eta: float, model: ResponseModel, reward: RewardFunction) -> Policy:
    """Projected gradient ascent step on the estimated expected reward, applied to every segment."""
    if eta < 0 or not math.isfinite(eta):
        raise ConfigError(f"step size must be finite and >= 0, got {eta!r}")
    grads = action_gradients(model, theta, reward, policy.table)
    for x, g in enumerate(grads):
        policy.table[x] = project_action(policy.interval, policy.table[x] + eta * g)
    return policy


class ExplorationKernel:
    """Fixed exploration law: uniform on the interval, or uniform over a finite grid.

    A grid only approximates full support; it must contain at least two
    distinct points of the interval so the features still span the parameter
    space.
    """

    def __init__(self, kind: str, interval: ActionInterval, points=None):
        self.kind = kind
        self.interval = interval
        if kind == "uniform_on_interval":
            self.points = None
        elif kind == "discrete_grid":
            if points is None:
                raise ConfigError("kernel.points: required for kind discrete_grid")
            pts = np.array(sorted(float(p) for p in points))
            outside = [p for p in pts if not interval.contains(p)]
            if outside:
                raise ConfigError(
                    f"kernel.points: {outside} outside action interval [{interval.lo}, {interval.hi}]"
                )
            if len(np.unique(pts)) < 2:
                raise ConfigError(
                    f"kernel.points: support {sorted(set(pts.tolist()))} has fewer than 2 distinct actions; "
                    "exploration would not span the parameter space"
                )
            self.points = pts
        else:
            raise ConfigError(f"kernel.kind: unknown kind {kind!r} (uniform_on_interval | discrete_grid)")

    @property
    def approximate_support(self) -> bool:
        return self.points is not None

    def sample(self, x: int, rng: RandomStream) -> float:
        if self.points is None:
            return rng.uniform(self.interval.lo, self.interval.hi)
        return float(self.points[rng.integers(len(self.points))])

    def average(self, f, n_quad: int = 10001):
        """``integral f(a) pi(da)``; composite Simpson for the uniform law, exact mean for grids."""
        if self.points is not None:
            return sum(f(float(p)) for p in self.points) / len(self.points)
        if n_quad % 2 == 0:
            n_quad += 1
        grid = self.interval.grid(n_quad)
        w = np.ones(n_quad)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        w /= w.sum()
        return sum(wi * f(float(a)) for wi, a in zip(w, grid))


def sample_exploration(kernel: ExplorationKernel, x: int, rng: RandomStream) -> float:
    return kernel.sample(x, rng)


def _rate_profile(c: float, d: int, burn_in: int, horizon: int) -> np.ndarray:
    t = np.arange(1, horizon + 1, dtype=float)
    eps = np.minimum(1.0, c * np.log(d * t) / (2.0 * np.sqrt(t)))
    eps[:burn_in] = 1.0
    return eps


def sandwich_ratios(c: float, d: int, burn_in: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """``S(T) / (sqrt(T) log(dT))`` for ``T`` in ``[burn_in + 1, horizon]``; returns ``(T, ratio)``."""
    eps = _rate_profile(c, d, burn_in, horizon)
    S = np.cumsum(eps)
    T = np.arange(burn_in + 1, horizon + 1)
    return T, S[T - 1] / (np.sqrt(T) * np.log(d * T))


class EpsilonSchedule:
    """``eps_t = 1`` during burn-in, then ``min(1, c log(dt) / (2 sqrt t))``.

    Construction scans every horizon ``T`` after burn-in and requires
    ``c_lo sqrt(T) log(dT) <= sum_{t<=T} eps_t <= c_hi sqrt(T) log(dT)``. When the
    configured scale fails, scales in ``[c_lo, c_hi]`` are tried (closest first);
    if none passes the constructor raises with the violating ``T``.
    """

    def __init__(self, c: float, d: int, burn_in: int, horizon: int, c_lo: float, c_hi: float,
                 n_candidates: int = 201):
        if not (c > 0 and c_lo > 0 and c_lo <= c_hi):
            raise ConfigError(f"schedule: need c > 0 and 0 < c1 <= c2, got c={c!r} c1={c_lo!r} c2={c_hi!r}")
        if burn_in < 0 or horizon < 1 or burn_in >= horizon:
            raise ConfigError(f"schedule: need 0 <= burn_in < horizon, got burn_in={burn_in} horizon={horizon}")
        if d * (burn_in + 1) <= 1:
            raise ConfigError("schedule: log(dT) must be positive on the scanned range")
        self.d = int(d)
        self.burn_in = int(burn_in)
        self.horizon = int(horizon)
        self.c_lo, self.c_hi = float(c_lo), float(c_hi)
        self.requested_c = float(c)
        candidates = [float(c)] if c_lo <= c <= c_hi else []
        others = np.linspace(c_lo, c_hi, n_candidates)
        candidates += sorted(others.tolist(), key=lambda v: (abs(v - c), v))
        first_failure = None
        for cand in candidates:
            bad = self._violation(cand)
            if bad is None:
                self.c = cand
                break
            if first_failure is None:
                first_failure = (cand, bad)
        else:
            cand, (T, ratio) = first_failure
            side = "below c1" if ratio < c_lo else "above c2"
            raise ConfigError(
                f"schedule: exploration sandwich unsatisfiable for c in [{c_lo}, {c_hi}] over T in "
                f"[{burn_in + 1}, {horizon}]; with c={cand!r} first violation at T={T}: "
                f"S(T)/(sqrt(T) log(dT))={ratio:.6g} {side}"
            )
        self.adjusted = self.c != self.requested_c
        self._eps = _rate_profile(self.c, self.d, self.burn_in, self.horizon)
        self._sums = np.cumsum(self._eps)
        T, ratio = sandwich_ratios(self.c, self.d, self.burn_in, self.horizon)
        self.ratio_range = (float(ratio.min()), float(ratio.max()))

    def _violation(self, c):
        T, ratio = sandwich_ratios(c, self.d, self.burn_in, self.horizon)
        bad = np.nonzero((ratio < self.c_lo) | (ratio > self.c_hi))[0]
        if bad.size == 0:
            return None
        i = int(bad[0])
        return int(T[i]), float(ratio[i])

    def epsilon_at(self, t: int) -> float:
        if t < 1:
            raise ConfigError(f"epsilon_at needs t >= 1, got {t}")
        if t <= self.horizon:
            return float(self._eps[t - 1])
        if t <= self.burn_in:
            return 1.0
        return min(1.0, self.c * math.log(self.d * t) / (2.0 * math.sqrt(t)))

    def partial_sum(self, T: int) -> float:
        if T <= 0:
            return 0.0
        if T <= self.horizon:
            return float(self._sums[T - 1])
        return float(self._sums[-1]) + math.fsum(self.epsilon_at(t) for t in range(self.horizon + 1, T + 1))


def epsilon_at(schedule: EpsilonSchedule, t: int) -> float:
    return schedule.epsilon_at(t)


BURN_IN_DELTA = 0.05 * UNIFORM_DELTA_MAX
BURN_IN_CAP = 500


def default_burn_in(rho_H: float, C_H: float, d: int, delta: float = BURN_IN_DELTA, cap: int = BURN_IN_CAP) -> int:
    """First ``T`` at which the exploration margin is positive under full exploration, capped."""
    return first_positive_margin(lambda T: float(T), rho_H, C_H, d, delta, cap) or cap


def first_positive_margin(partial_sum, rho_H, C_H, d, delta, limit) -> int | None:
    for T in range(1, limit + 1):
        if exploration_margin(partial_sum(T), T, delta, rho_H, C_H, d) > 0:
            return T
    return None


def last_positive_margin(partial_sum, rho_H, C_H, d, delta, limit) -> int | None:
    """Largest ``T <= limit`` with a positive margin (``None`` when there is none)."""
    for T in range(limit, 0, -1):
        if exploration_margin(partial_sum(T), T, delta, rho_H, C_H, d) > 0:
            return T
    return None


def oracle_best_action(model: ResponseModel, reward: RewardFunction, theta, x: int,
                       n_grid: int = ORACLE_GRID, tol: float = ORACLE_TOL) -> tuple[float, float]:
    """Argmax of the expected reward on the interval: grid scan, then golden section in the best cell.

    Ties go to the lowest action.
    """
    iv = model.interval
    grid = iv.grid(n_grid)
    vals = model.expected_reward_grid(theta, reward, x, grid)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    a, v = golden_section_max(lambda s: model.expected_reward(theta, reward, x, s), lo, hi, tol=tol)
    if vals[i] > v:
        return float(grid[i]), float(vals[i])
    return float(a), float(v)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    fatal: bool = True


@dataclass
class Certificate:
    constants: ModelConstants
    checks: list[Check] = field(default_factory=list)
    resolution: dict = field(default_factory=dict)
    pl_violations: list[tuple[str, float, float]] = field(default_factory=list)
    best_actions: list[tuple[float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks if c.fatal)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if c.fatal and not c.passed]


def _argmin_refine(f, grid, vals):
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    a, neg = golden_section_max(lambda s: -f(s), lo, hi, tol=1e-9)
    return (a, -neg) if -neg < vals[i] else (float(grid[i]), float(vals[i]))


def certify_constants(model: ResponseModel, reward: RewardFunction, kernel: ExplorationKernel,
                      space: SegmentSpace, loss: LossSpec, theta_norm_bound: float, W: float,
                      n_probe: int = 2001, n_quad: int = 10001, n_theta: int = 1000,
                      seed: int = 20240601) -> Certificate:
    """Numerically certify every constant the guarantees use.

    ``rho_H``: smallest eigenvalue of the exploration-averaged information
    matrix. ``C_H``: largest information operator norm on the probe grid.
    ``L_a``: largest ``|d^2 r/da^2|`` under the truth. ``gamma_a``: smallest
    ``g^2 / (2 * suboptimality)`` over the probe grid away from the optimum.
    ``L_theta``: largest gradient-stability ratio over ``n_theta`` parameters
    drawn uniformly in the ball of radius ``theta_norm_bound`` around the truth,
    and its limit at the truth (Jacobian norm).
    """
    theta_star = model.theta_star
    d = model.d
    iv = model.interval
    probe = iv.grid(n_probe)
    checks: list[Check] = []
    if len(space) != model.kernel.n_segments:
        raise ConfigError("segment space does not match the model kernel")

    def avg_info(a):
        return sum(space.weights[x] * loss.information(x, a) for x in range(len(space)))

    A = kernel.average(avg_info, n_quad)
    rho_H = float(np.linalg.eigvalsh(A)[0])
    if rho_H <= 1e-10:
        raise ConfigError(
            f"exploration kernel does not span parameter space: min-eig of averaged information {rho_H:.3e} <= 1e-10"
            + (f" (kernel support {kernel.points.tolist()})" if kernel.points is not None else "")
        )
    C_H = max(float(np.linalg.eigvalsh(loss.information(x, a))[-1]) for x in range(len(space)) for a in probe)

    best = [oracle_best_action(model, reward, theta_star, x) for x in range(len(space))]
    h = 1e-5 * (iv.hi - iv.lo)
    L_a = 0.0
    gamma_a = math.inf
    pl_bad = []
    for x, sid in enumerate(space.ids):
        a_star, v_star = best[x]

        def curvature(s, x=x):
            lo, hi = max(s - h, iv.lo), min(s + h, iv.hi)
            g = model.grad_expected_reward_grid(theta_star, reward, x, np.array([lo, hi]))
            return (g[1] - g[0]) / (hi - lo)

        curv = np.abs([curvature(s) for s in probe])
        i = int(np.argmax(curv))
        _, cmax = golden_section_max(lambda s: abs(curvature(s)), probe[max(i - 1, 0)],
                                     probe[min(i + 1, n_probe - 1)], tol=1e-9)
        L_a = max(L_a, float(curv[i]), cmax)

        def pl_ratio(s, x=x, a_star=a_star, v_star=v_star):
            sub = v_star - model.expected_reward(theta_star, reward, x, s)
            g = model.grad_a_expected_reward(theta_star, reward, x, s)
            if sub <= 0:
                return math.inf
            return g * g / (2.0 * sub)

        keep = probe[np.abs(probe - a_star) > 1e-6]
        subs = v_star - model.expected_reward_grid(theta_star, reward, x, keep)
        grads = model.grad_expected_reward_grid(theta_star, reward, x, keep)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(subs > 0, grads**2 / (2.0 * subs), np.inf)
        for a, r, s in zip(keep, ratios, subs):
            if r <= 0:
                pl_bad.append((sid, float(a), float(r)))
        _, rmin = _argmin_refine(pl_ratio, keep, ratios)
        gamma_a = min(gamma_a, float(rmin))

    checks.append(Check("pl_condition", gamma_a > 0 and not pl_bad,
                        f"gamma_a={gamma_a!r}; {len(pl_bad)} probe points without a PL constant"))
    if gamma_a > L_a:
        # the ratio cannot exceed the curvature in exact arithmetic; grid and refinement noise can
        gamma_a = L_a

    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_theta, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = theta_norm_bound * rng.random(n_theta) ** (1.0 / d)
    act = iv.grid(201)
    g_star = [model.grad_expected_reward_grid(theta_star, reward, x, act) for x in range(len(space))]
    L_theta = 0.0
    for u, r in zip(dirs, radii):
        if r == 0:
            continue
        th = theta_star + r * u
        diff = max(np.max(np.abs(model.grad_expected_reward_grid(th, reward, x, act) - g_star[x]))
                   for x in range(len(space)))
        L_theta = max(L_theta, float(diff / r))
    step = 1e-6
    for x in range(len(space)):
        J = np.empty((d, act.size))
        for k in range(d):
            e = np.zeros(d)
            e[k] = step
            J[k] = (model.grad_expected_reward_grid(theta_star + e, reward, x, act)
                    - model.grad_expected_reward_grid(theta_star - e, reward, x, act)) / (2 * step)
        L_theta = max(L_theta, float(np.max(np.linalg.norm(J, axis=0))))

    c1, c2 = loss.c1, loss.c2
    checks.append(Check("exploration_span", True, f"rho_H={rho_H!r}"))
    theta_norm = float(np.linalg.norm(theta_star))
    checks.append(Check("theta_norm_bound", theta_norm <= theta_norm_bound,
                        f"|theta*|={theta_norm!r} vs bound {theta_norm_bound!r}"))
    interior = all(iv.lo < a < iv.hi for a, _ in best)
    checks.append(Check("interior_optimum", interior,
                        "per-segment optima " + ", ".join(f"{a:.6g}" for a, _ in best), fatal=False))
    consts = ModelConstants(c1=float(c1), c2=float(c2), C_H=float(C_H), rho_H=float(rho_H), L_a=float(L_a),
                            gamma_a=float(gamma_a), L_theta=float(L_theta), W=W, theta_norm_bound=theta_norm_bound)
    resolution = {
        "rho_H": f"{'grid mean' if kernel.points is not None else f'{n_quad}-point Simpson'}",
        "C_H": f"{n_probe}-point grid per segment",
        "L_a": f"{n_probe}-point grid, central differences h={h:.1e}, golden refinement",
        "gamma_a": f"{n_probe}-point grid excluding 1e-6 of the optimum, golden refinement",
        "L_theta": f"{n_theta} draws in radius-{theta_norm_bound:g} ball, 201 actions, Jacobian at truth",
    }
    return Certificate(consts, checks, resolution, pl_bad, best)
