"""Compatible losses and their information matrices.

Two families are provided: the rescaled negative log-likelihood of an
exponential-family response (with the strongly convex link extension), and a
rescaled least-squares loss for bounded responses with an affine mean. Each
exposes per-observation ``(value, grad, hess)`` in the parameter, the
information matrix ``H(x, a)`` that lower-bounds the Hessian, and a batched
evaluator used by the ERM solver.
"""

from __future__ import annotations

import numpy as np

from .core import ActionInterval, ConfigError
from .models import GlmSpec, ResponseModel, SegmentAffineKernel, link_extension_btilde

CHEB_NODES = 64
CHEB_TAIL_TOL = 1e-14


class LossSpec:
    kind: str
    d: int
    c1: float
    c2: float

    def terms(self, theta, x, a, y):
        raise NotImplementedError

    def information(self, x, a) -> np.ndarray:
        raise NotImplementedError

    def statistic(self, x, y) -> float:
        """Per-observation scalar the batched evaluator needs besides ``psi``."""
        raise NotImplementedError

    def batch(self, theta, Psi, stats, need_derivatives: bool = True):
        """Summed loss over rows of ``Psi`` (ridge excluded); ``(f, g, H)`` or ``f``."""
        raise NotImplementedError

    def features(self, x, a) -> np.ndarray:
        return self.kernel.features(x, a)

    def accumulator(self) -> "DirectSums":
        """Running store the ERM objective is evaluated from."""
        return DirectSums(self)


class DirectSums:
    """Keeps every ``(psi, statistic)`` row; each evaluation is a full pass."""

    def __init__(self, loss: LossSpec):
        self.loss = loss
        self.n = 0
        self._Psi = np.empty((256, loss.d))
        self._stats = np.empty(256)

    def add(self, x, a, stat):
        if self.n == self._Psi.shape[0]:
            self._Psi = np.concatenate([self._Psi, np.empty_like(self._Psi)])
            self._stats = np.concatenate([self._stats, np.empty_like(self._stats)])
        self._Psi[self.n] = self.loss.features(x, a)
        self._stats[self.n] = stat
        self.n += 1

    @property
    def Psi(self):
        return self._Psi[: self.n]

    @property
    def stats(self):
        return self._stats[: self.n]

    def evaluate(self, theta, need_derivatives: bool = True):
        return self.loss.batch(theta, self.Psi, self.stats, need_derivatives)


class SegmentMoments(DirectSums):
    """Interpolatory action moments per segment for a smooth loss in ``w = alpha_x + beta_x a``.

    With ``l_n`` the Lagrange basis on Chebyshev nodes ``a_n`` of the action
    interval, ``sum_i f(a_i) a_i^k`` equals ``sum_n f(a_n) L_kn`` where
    ``L_kn = sum_i a_i^k l_n(a_i)``, up to the interpolation error of ``f``.
    An evaluation then costs ``O(|X| * nodes)`` instead of a pass over the log.
    The trailing Chebyshev coefficients of ``b``, ``b'`` and ``b''`` gate the
    shortcut: when they are not negligible, or ``w`` leaves ``[-W, W]`` on the
    interval (where the extension is only twice differentiable), the evaluation
    falls back to the full pass.
    """

    def __init__(self, loss: "GlmLogLikLoss", interval: ActionInterval, nodes: int = CHEB_NODES):
        super().__init__(loss)
        k = loss.kernel.n_segments
        self.interval = interval
        self.nodes = nodes
        self._mid = 0.5 * (interval.hi + interval.lo)
        self._half = 0.5 * (interval.hi - interval.lo)
        self._orders = np.arange(nodes)
        angles = np.pi * (self._orders + 0.5) / nodes
        self.a_nodes = self._mid + self._half * np.cos(angles)
        # c = D @ f(a_nodes) are the Chebyshev coefficients of the interpolant
        D = (2.0 / nodes) * np.cos(np.outer(self._orders, angles))
        D[0] *= 0.5
        self._D = D
        self._tail = np.ascontiguousarray(D[-4:].T)
        seg = np.arange(k)
        self._h00 = (2 * seg, 2 * seg)
        self._h01 = (2 * seg, 2 * seg + 1)
        self._h10 = (2 * seg + 1, 2 * seg)
        self._h11 = (2 * seg + 1, 2 * seg + 1)
        self.L = np.zeros((3, k, nodes))
        self.Sh = np.zeros((2, k))
        self.fallbacks = 0

    def add(self, x, a, stat):
        super().add(x, a, stat)
        u = min(max((a - self._mid) / self._half, -1.0), 1.0)
        basis = np.cos(self._orders * np.arccos(u)) @ self._D
        self.L[0, x] += basis
        self.L[1, x] += a * basis
        self.L[2, x] += a * a * basis
        self.Sh[0, x] += stat
        self.Sh[1, x] += stat * a

    def evaluate(self, theta, need_derivatives: bool = True):
        loss = self.loss
        alpha, beta = theta[0::2], theta[1::2]
        reach = max(np.abs(alpha + beta * self.interval.lo).max(), np.abs(alpha + beta * self.interval.hi).max())
        if self.n == 0 or reach > loss.W:
            self.fallbacks += self.n > 0
            return super().evaluate(theta, need_derivatives)
        w = alpha[:, None] + beta[:, None] * self.a_nodes
        link = loss.link
        if need_derivatives:
            vals = np.stack(link.derivatives(w))
        else:
            vals = link.value(w)[None]
        if np.abs(vals @ self._tail).max() > CHEB_TAIL_TOL * max(1.0, np.abs(vals).max()):
            self.fallbacks += 1
            return super().evaluate(theta, need_derivatives)
        # P[p, q, x] = sum_n vals[p, x, n] * L[q, x, n]
        P = np.einsum("pkn,qkn->pqk", vals, self.L)
        f = loss.scale * (float(P[0, 0].sum()) - float(alpha @ self.Sh[0] + beta @ self.Sh[1]))
        if not need_derivatives:
            return f
        g = np.empty(loss.d)
        g[0::2] = P[1, 0] - self.Sh[0]
        g[1::2] = P[1, 1] - self.Sh[1]
        H = np.zeros((loss.d, loss.d))
        H[self._h00] = P[2, 0]
        H[self._h01] = P[2, 1]
        H[self._h10] = P[2, 1]
        H[self._h11] = P[2, 2]
        g *= loss.scale
        H *= loss.scale
        return f, g, H


class QuadraticSums(DirectSums):
    """Exact sufficient statistics ``sum psi^T psi``, ``sum psi^T y``, ``sum y^2`` for least squares."""

    def __init__(self, loss: "LeastSquaresLoss"):
        super().__init__(loss)
        self.PtP = np.zeros((loss.d, loss.d))
        self.Pty = np.zeros(loss.d)
        self.yy = 0.0

    def add(self, x, a, stat):
        super().add(x, a, stat)
        psi = self.loss.features(x, a)
        self.PtP += np.outer(psi, psi)
        self.Pty += stat * psi
        self.yy += stat * stat

    def evaluate(self, theta, need_derivatives: bool = True):
        C1 = self.loss.C1
        Pt = self.PtP @ theta
        f = 0.5 * C1 * (self.yy - 2.0 * float(theta @ self.Pty) + float(theta @ Pt))
        if not need_derivatives:
            return f
        return f, C1 * (Pt - self.Pty), C1 * self.PtP


class GlmLogLikLoss(LossSpec):
    """``l = -(2 c1 / c2) (h(y) w - btilde(w))`` with ``w = psi(x, a) theta``."""

    kind = "glm_loglik"

    def __init__(self, glm: GlmSpec, W: float, c1: float, c2: float,
                 interval: ActionInterval | None = None):
        self.glm = glm
        self.interval = interval
        self.kernel = glm.kernel
        self.link = glm.link
        self.d = glm.d
        self.W = float(W)
        self.c1 = float(c1)
        self.c2 = float(c2)
        self.scale = 2.0 * self.c1 / self.c2
        self.info_scale = 2.0 * self.c1**2 / self.c2

    def terms(self, theta, x, a, y):
        psi = self.kernel.features(x, a)
        w = float(psi @ theta)
        bt, bt1, bt2 = link_extension_btilde(self.link, self.W, w)
        h = float(self.link.statistic(y))
        value = self.scale * (float(bt) - h * w)
        grad = self.scale * (float(bt1) - h) * psi
        hess = self.scale * float(bt2) * np.outer(psi, psi)
        return value, grad, hess

    def information(self, x, a) -> np.ndarray:
        psi = self.kernel.features(x, a)
        return self.info_scale * np.outer(psi, psi)

    def statistic(self, x, y) -> float:
        return float(self.link.statistic(y))

    def batch(self, theta, Psi, stats, need_derivatives: bool = True):
        w = Psi @ theta
        bt, bt1, bt2 = link_extension_btilde(self.link, self.W, w)
        f = self.scale * float(np.sum(bt - stats * w))
        if not need_derivatives:
            return f
        g = self.scale * (Psi.T @ (bt1 - stats))
        H = self.scale * ((Psi * bt2[:, None]).T @ Psi)
        return f, g, H

    def accumulator(self) -> DirectSums:
        if self.interval is not None and isinstance(self.kernel, SegmentAffineKernel):
            return SegmentMoments(self, self.interval)
        return DirectSums(self)


class LeastSquaresLoss(LossSpec):
    """``l = (C1 / 2) (y - psi theta)^2`` for responses in ``[y_lo, y_hi]``.

    The dominating matrix is ``dominating_scale * psi^T psi``. With an affine
    mean the curvature sandwich reduces to ``0 <= dominating_scale <= c1`` and
    ``c2 * dominating_scale >= 1``.
    """

    kind = "least_squares"

    def __init__(self, kernel: SegmentAffineKernel, y_lo: float, y_hi: float,
                 c1: float, c2: float, dominating_scale: float):
        if not y_lo < y_hi:
            raise ConfigError(f"loss.response_bounds: need y_lo < y_hi, got [{y_lo}, {y_hi}]")
        if not (c1 > 0 and c2 > 0):
            raise ConfigError("loss.c1 and loss.c2 must be > 0")
        self.kernel = kernel
        self.d = kernel.d
        self.y_lo, self.y_hi = float(y_lo), float(y_hi)
        self.c1, self.c2 = float(c1), float(c2)
        self.dominating_scale = float(dominating_scale)
        span = self.y_hi - self.y_lo
        self.gap = 1.0 / self.c1 + self.y_lo - self.y_hi
        if self.gap <= 0:
            raise ConfigError(
                f"loss.c1={c1!r} must be strictly below 1/(y_hi - y_lo)={1.0 / span!r}; "
                "information scale would be <= 0"
            )
        self.C1 = 8.0 / (self.c2 * span**2) * self.gap
        self.info_scale = self.C1 * self.gap * self.dominating_scale

    def _check_y(self, y):
        if not self.y_lo <= y <= self.y_hi:
            raise ConfigError(f"response {y!r} outside [{self.y_lo}, {self.y_hi}]")

    def terms(self, theta, x, a, y):
        self._check_y(y)
        psi = self.kernel.features(x, a)
        resid = y - float(psi @ theta)
        value = 0.5 * self.C1 * resid**2
        grad = -self.C1 * resid * psi
        hess = self.C1 * np.outer(psi, psi)
        return value, grad, hess

    def dominating_matrix(self, x, a) -> np.ndarray:
        psi = self.kernel.features(x, a)
        return self.dominating_scale * np.outer(psi, psi)

    def information(self, x, a) -> np.ndarray:
        return self.C1 * self.gap * self.dominating_matrix(x, a)

    def statistic(self, x, y) -> float:
        self._check_y(y)
        return float(y)

    def batch(self, theta, Psi, stats, need_derivatives: bool = True):
        resid = stats - Psi @ theta
        f = 0.5 * self.C1 * float(resid @ resid)
        if not need_derivatives:
            return f
        g = -self.C1 * (Psi.T @ resid)
        H = self.C1 * (Psi.T @ Psi)
        return f, g, H

    def accumulator(self) -> DirectSums:
        return QuadraticSums(self)

    def sandwich_violations(self, theta_star, space_size: int, actions) -> list[str]:
        """Probe-grid check of the curvature sandwich for the affine mean."""
        out = []
        for x in range(space_size):
            for a in actions:
                psi = self.kernel.features(x, a)
                grad_mu = psi
                dom = self.dominating_matrix(x, a)
                lo = np.linalg.eigvalsh(dom)[0]  # hessian of an affine mean is zero
                mid = np.linalg.eigvalsh(self.c1 * np.outer(grad_mu, grad_mu) - dom)[0]
                hi = np.linalg.eigvalsh(self.c2 * dom - np.outer(grad_mu, grad_mu))[0]
                for label, val in (("0 <= dominating", lo), ("dominating <= c1 grad grad^T", mid),
                                   ("grad grad^T <= c2 dominating", hi)):
                    if val < -1e-12:
                        out.append(f"{label} fails at segment {x}, a={a:.6g} (min eig {val:.3e})")
        return out


def check_subgaussian_compatibility(model: ResponseModel, loss: LossSpec, x: int, a: float, lam):
    """Exact finite-support check of ``E exp(lam^T grad l(theta*)) <= exp(lam^T H lam)``.

    Returns ``(lhs, rhs, ok)``.
    """
    if model.link.measure != "counting":
        raise ConfigError("sub-Gaussian compatibility is only checked exactly for finite-support laws")
    lam = np.asarray(lam, dtype=float)
    ys, probs = model.response_probabilities(model.theta_star, x, a)
    lhs = 0.0
    for y, p in zip(ys, probs):
        _, grad, _ = loss.terms(model.theta_star, x, a, y)
        lhs += p * np.exp(float(lam @ grad))
    rhs = float(np.exp(lam @ loss.information(x, a) @ lam))
    return float(lhs), rhs, bool(lhs <= rhs * (1 + 1e-12))
