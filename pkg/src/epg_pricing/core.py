"""Shared vocabulary: segments, price intervals, observations, constants, RNG."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or violated construction-time invariant."""


class NumericalError(ArithmeticError):
    """Non-finite value reached a place where it must not."""


class RandomStream:
    """Seeded deterministic generator (numpy PCG64 driven by a SeedSequence).

    Streams are single-owner. Use :meth:`split` to hand independent
    substreams to other consumers instead of sharing one.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["RandomStream"]:
        return [RandomStream(s) for s in self._seq.spawn(n)]

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(self._gen.uniform(lo, hi))

    def normal(self) -> float:
        return float(self._gen.standard_normal())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def integers(self, n: int) -> int:
        return int(self._gen.integers(n))


@dataclass(frozen=True)
class SegmentSpace:
    """Finite customer-segment space with its arrival distribution and unit costs."""

    ids: tuple[str, ...]
    weights: tuple[float, ...]
    costs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(s) for s in self.ids))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        n = len(self.ids)
        if n < 1:
            raise ConfigError("segments.ids: need at least one segment")
        if len(set(self.ids)) != n:
            raise ConfigError(f"segments.ids: identifiers must be distinct, got {self.ids}")
        if len(self.weights) != n or len(self.costs) != n:
            raise ConfigError("segments: ids, weights and costs must have equal length")
        if any(not math.isfinite(w) or w < 0 for w in self.weights):
            raise ConfigError(f"segments.weights: entries must be finite and >= 0, got {self.weights}")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ConfigError(f"segments.weights: must sum to 1 within 1e-12, sum={math.fsum(self.weights)!r}")
        if any(not math.isfinite(c) or c < 0 for c in self.costs):
            raise ConfigError(f"segments.costs: entries must be finite and >= 0, got {self.costs}")
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "_last_live", max(i for i, w in enumerate(self.weights) if w > 0))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights)


def sample_segment(space: SegmentSpace, rng: RandomStream) -> int:
    """Draw a segment index with probability ``weights[i]``; one uniform draw."""
    u = rng.uniform()
    idx = int(np.searchsorted(space._cum, u, side="right"))
    return min(idx, space._last_live)


@dataclass(frozen=True)
class ActionInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ConfigError(f"actions: bounds must be finite, got [{self.lo}, {self.hi}]")
        if not self.lo < self.hi:
            raise ConfigError(f"actions: need lo < hi, got [{self.lo}, {self.hi}]")

    def contains(self, a: float) -> bool:
        return self.lo <= a <= self.hi

    def grid(self, n: int) -> np.ndarray:
        return np.linspace(self.lo, self.hi, n)


def project_action(interval: ActionInterval, a: float) -> float:
    """Euclidean projection onto ``[lo, hi]``."""
    if not math.isfinite(a):
        raise NumericalError(f"non-finite action {a!r}; upstream computation diverged")
    return min(max(a, interval.lo), interval.hi)


@dataclass(frozen=True)
class Observation:
    t: int
    x: int
    a: float
    y: float
    explored: bool


def as_parameter(values: Sequence[float] | np.ndarray, d: int | None = None) -> np.ndarray:
    """Validate a parameter vector (finite, length ``d``) and return a float copy."""
    theta = np.array(values, dtype=float).reshape(-1)
    if d is not None and theta.shape[0] != d:
        raise ConfigError(f"parameter has length {theta.shape[0]}, model dimension is {d}")
    if not np.all(np.isfinite(theta)):
        raise NumericalError(f"parameter has non-finite entries: {theta}")
    return theta


@dataclass(frozen=True)
class ModelConstants:
    """Every constant used by the certified inequalities.

    ``c1``/``c2`` are the loss curvature constants, ``C_H``/``rho_H`` bound the
    information matrix from above and (under exploration) from below,
    ``L_a``/``gamma_a`` are smoothness and Polyak-Lojasiewicz constants of the
    true expected reward in the action, ``L_theta`` its stability in the
    parameter, ``W`` the natural-parameter range and ``theta_norm_bound`` an
    a-priori bound on the true parameter norm.
    """

    c1: float
    c2: float
    C_H: float
    rho_H: float
    L_a: float
    gamma_a: float
    L_theta: float
    W: float
    theta_norm_bound: float
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        checks = [
            ("c1", self.c1 > 0),
            ("c2", self.c2 > 0),
            ("C_H", self.C_H >= 0),
            ("rho_H", self.rho_H > 0),
            ("L_a", self.L_a > 0),
            ("gamma_a", self.gamma_a > 0),
            ("L_theta", self.L_theta >= 0),
            ("W", self.W > 0),
            ("theta_norm_bound", self.theta_norm_bound > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"constant {name}={getattr(self, name)!r} out of range")
        if self.L_a < self.gamma_a:
            raise ConfigError(f"need L_a >= gamma_a, got L_a={self.L_a!r} gamma_a={self.gamma_a!r}")
        if self.c1 > self.c2:
            raise ConfigError(f"need c1 <= c2, got c1={self.c1!r} c2={self.c2!r}")


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200):
    """Maximise a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))``.

    Stops when the bracket is narrower than ``tol``. Ties resolve toward the
    lower end of the bracket.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    best = [(fa, -i, xa) for i, (xa, fa) in enumerate(((a, f(a)), (c, fc), (d, fd), (b, f(b))))]
    fbest, _, xbest = max(best)
    return xbest, fbest
