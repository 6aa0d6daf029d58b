"""Ridge-regularised empirical risk minimisation and estimation-error diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, Observation
from .losses import LossSpec

GRAD_TOL = 1e-8
MAX_NEWTON_ITER = 100
MAX_COND = 1e12


@dataclass
class SolverReport:
    iterations: int
    final_grad_norm: float
    converged: bool
    objective: float
    method: str = "newton"


class SolverError(RuntimeError):
    def __init__(self, message: str, report: SolverReport):
        super().__init__(message)
        self.report = report


class ErmState:
    """Observation log, running estimate and the design matrix ``V = 2I + sum H``.

    The objective is evaluated through the loss's accumulator, which keeps
    whatever running sums make a pass cheap (per-segment action moments for the
    log-likelihood loss, quadratic sums for least squares) along with the raw log.
    """

    def __init__(self, loss: LossSpec, tol: float = GRAD_TOL, max_iter: int = MAX_NEWTON_ITER):
        self.loss = loss
        self.d = loss.d
        self.tol = tol
        self.max_iter = max_iter
        self.theta = np.zeros(self.d)
        self.V = 2.0 * np.eye(self.d)
        self.sums = loss.accumulator()
        self._log: list[tuple[int, float, float]] = []
        self.last_report = SolverReport(0, 0.0, True, 0.0)
        self._eye = np.eye(self.d)
        # data part of (f, g, H) at self.theta; ingest adds the new point's terms
        self._cache = (0.0, np.zeros(self.d), np.zeros((self.d, self.d)))

    @property
    def n_obs(self) -> int:
        return self.sums.n

    @property
    def Psi(self) -> np.ndarray:
        return self.sums.Psi

    @property
    def stats(self) -> np.ndarray:
        return self.sums.stats

    def observations(self) -> list[tuple[int, float, float]]:
        return list(self._log)

    def ingest(self, obs: Observation) -> "ErmState":
        """Append one observation and add its information matrix to ``V``; does not re-solve."""
        self.sums.add(obs.x, obs.a, self.loss.statistic(obs.x, obs.y))
        self._log.append((obs.x, obs.a, obs.y))
        self.V += self.loss.information(obs.x, obs.a)
        if self._cache is not None:
            value, grad, hess = self.loss.terms(self.theta, obs.x, obs.a, obs.y)
            f, g, H = self._cache
            self._cache = (f + value, g + grad, H + hess)
        return self

    def objective(self, theta, need_derivatives: bool = True):
        """Regularised objective ``sum l + |theta|^2 / 2`` (and derivatives)."""
        ridge = 0.5 * float(theta @ theta)
        if self.n_obs == 0:
            if not need_derivatives:
                return ridge
            return ridge, theta.copy(), self._eye.copy()
        out = self.sums.evaluate(theta, need_derivatives)
        if not need_derivatives:
            return out + ridge
        f, g, H = out
        return f + ridge, g + theta, H + self._eye

    def recompute_V(self) -> np.ndarray:
        V = 2.0 * np.eye(self.d)
        for x, a, _ in self._log:
            V += self.loss.information(x, a)
        return V

    def fit(self, theta0=None) -> tuple[np.ndarray, SolverReport]:
        """Damped Newton on the regularised objective, warm-started at the current estimate.

        Falls back to Armijo gradient steps when the Hessian is too badly
        conditioned. Raises :class:`SolverError` instead of returning an
        unconverged estimate.
        """
        if theta0 is None and self._cache is not None:
            theta = self.theta.copy()
            f, g, H = self._cache
            f, g, H = f + 0.5 * float(theta @ theta), g + theta, H + self._eye
        else:
            theta = self.theta.copy() if theta0 is None else np.array(theta0, dtype=float)
            f, g, H = self.objective(theta)

        method = "newton"
        it = 0
        gnorm = math.sqrt(float(g @ g))
        while gnorm > self.tol and it < self.max_iter:
            it += 1
            evals, evecs = np.linalg.eigh(H)
            if not evals[0] > 0 or evals[-1] / evals[0] > MAX_COND:
                method = "gradient"
                p = -g
            else:
                p = -(evecs @ ((evecs.T @ g) / evals))
            slope = float(g @ p)
            step = 1.0
            accepted = False
            for _ in range(60):
                cand = theta + step * p
                fc, gc, Hc = self.objective(cand)
                gcn = math.sqrt(float(gc @ gc))
                armijo = fc <= f + 1e-4 * step * slope
                # near the optimum f changes below rounding; accept any step that shrinks the gradient
                flat = fc <= f + 1e-12 * (1.0 + abs(f)) and gcn < gnorm
                if armijo or flat:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            theta, f, g, H, gnorm = cand, fc, gc, Hc, gcn

        report = SolverReport(it, gnorm, gnorm <= self.tol, f, method)
        self.last_report = report
        if not report.converged:
            raise SolverError(
                f"ERM solver stopped after {it} iterations with gradient norm {gnorm:.3e} (tol {self.tol:.0e})",
                report,
            )
        self.theta = theta
        self._cache = (f - 0.5 * float(theta @ theta), g - theta, H - self._eye)
        return theta.copy(), report


def _check_delta(delta: float, upper: float, inclusive: bool):
    ok = delta > 0 and (delta <= upper if inclusive else delta < upper)
    if not ok:
        bracket = "]" if inclusive else ")"
        raise ConfigError(f"delta={delta!r} outside (0, {upper:.6g}{bracket}")


def estimation_error_bound(V: np.ndarray, theta_star, delta: float) -> float:
    """High-probability bound on ``|theta_T - theta*|^2`` from the current design matrix.

    ``8 / rho_min(V) * (log det V + 2 log(1/delta) + |theta*|^2_{V^-1})``.
    """
    _check_delta(delta, 1.0, inclusive=False)
    evals, evecs = np.linalg.eigh(V)
    proj = evecs.T @ np.asarray(theta_star, dtype=float)
    weighted = float(np.sum(proj**2 / evals))
    return 8.0 / evals[0] * (float(np.sum(np.log(evals))) + 2.0 * math.log(1.0 / delta) + weighted)


UNIFORM_DELTA_MAX = 3.0 / math.pi**2


def exploration_margin(eps_sum: float, T: int, delta: float, rho_H: float, C_H: float, d: int) -> float:
    """``2 + rho_H * sum(eps) - 2 C_H (L + sqrt(2 T L))`` with ``L = log(2 d T^2 / delta)``.

    The uniform-in-time error bound is only valid where this is positive.
    """
    _check_delta(delta, UNIFORM_DELTA_MAX, inclusive=True)
    if T < 1:
        raise ConfigError("exploration margin needs T >= 1")
    L = math.log(2.0 * d * T * T / delta)
    return 2.0 + rho_H * eps_sum - 2.0 * C_H * (L + math.sqrt(2.0 * T * L))


def uniform_error_bound(eps_sum: float, T: int, delta: float, rho_H: float, C_H: float, d: int,
                        theta_star_norm_sq: float) -> float | None:
    """Time-uniform bound on ``|theta_T - theta*|^2``; ``None`` where the margin is not positive."""
    M = exploration_margin(eps_sum, T, delta, rho_H, C_H, d)
    if M <= 0:
        return None
    L = math.log(2.0 * d * T * T / delta)
    num = (8.0 * d * math.log(2.0 + C_H * (2.0 * T + 6.0 * L))
           + 16.0 * math.log(2.0 * T * T / delta) + 2.0 * theta_star_norm_sq)
    return num / M


def self_normalized_check(state: ErmState, theta_star, delta: float) -> tuple[float, float, bool]:
    """``|S_T|^2_{V^-1}`` against ``log det V + 2 log(1/delta)``, ``S_T`` the score sum at the truth."""
    _check_delta(delta, 1.0, inclusive=False)
    theta_star = np.asarray(theta_star, dtype=float)
    if state.n_obs == 0:
        S = np.zeros(state.d)
    else:
        _, S, _ = state.sums.evaluate(theta_star)
    lhs = float(S @ np.linalg.solve(state.V, S))
    rhs = float(np.linalg.slogdet(state.V)[1]) + 2.0 * math.log(1.0 / delta)
    return lhs, rhs, lhs <= rhs
