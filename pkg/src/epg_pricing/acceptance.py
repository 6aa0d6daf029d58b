"""Acceptance suite: each criterion runs its experiment or property check and
reports pass/fail with the measured statistic."""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .core import ActionInterval, Observation
from .engine import run_replications
from .environments import SHIPPED, Environment, build_environment, load_config, shipped_path
from .erm import ErmState
from .losses import GlmLogLikLoss, LeastSquaresLoss, check_subgaussian_compatibility
from .models import GlmSpec, LogisticLink, SegmentAffineKernel, glm_constants, link_extension_btilde
from .policy import sandwich_ratios


@dataclass(frozen=True)
class Scale:
    label: str
    T_regret: int
    regret_checkpoints: tuple
    n_regret_seeds: int
    slope_epg: tuple
    slope_explore: tuple
    regret_ratio: float
    n_coverage: int
    T_estimation: int
    n_samples: int
    n_datasets: int
    n_gradient_points: int


FULL = Scale("full", 50000, (5000, 10000, 20000, 50000), 20, (0.35, 0.65), (0.9, 1.1), 0.5,
             200, 2000, 10000, 20, 1000)
# Shorter horizon and fewer replications; bands widened for the early transient.
SMOKE = Scale("smoke", 5000, (1000, 2000, 5000), 5, (0.25, 0.9), (0.8, 1.2), 0.75,
              50, 1000, 1000, 5, 200)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self, label: str = "") -> str:
        tag = "PASS" if self.passed else "FAIL"
        suffix = f" [{label}]" if label and label != "full" else ""
        return f"{tag} C{self.number} {self.name}{suffix}: {self.detail} ({self.seconds:.1f}s)"


def binomial_limit(p: float, n: int) -> float:
    return p + 3.0 * math.sqrt(p * (1.0 - p) / n)


@dataclass
class Context:
    """Shared state so expensive runs are reused by several criteria."""

    config: str | Path = "logit-2seg"
    scale: Scale = FULL
    jobs: int = 1
    _env: Environment | None = None
    _cache: dict = field(default_factory=dict)

    @property
    def env(self) -> Environment:
        if self._env is None:
            self._env = build_environment(load_config(self.config))
        return self._env

    def seeds(self, n: int, offset: int = 0) -> list[int]:
        base = list(self.env.config.run.seeds)
        if offset == 0 and len(base) >= n:
            return base[:n]
        return list(range(1000 * (offset + 1), 1000 * (offset + 1) + n))

    def regret_runs(self, algorithm: str):
        key = ("regret", algorithm)
        if key not in self._cache:
            sc = self.scale
            self._cache[key] = run_replications(
                self.env, self.seeds(sc.n_regret_seeds), algorithm=algorithm, T=sc.T_regret,
                checkpoints=list(sc.regret_checkpoints), jobs=self.jobs)
        return self._cache[key]


def _timed(number, name, fn, ctx):
    start = time.perf_counter()
    try:
        passed, detail = fn(ctx)
    except Exception as exc:  # a criterion that crashes is a failed criterion, the suite continues
        passed, detail = False, f"error: {type(exc).__name__}: {exc}"
    return CriterionResult(number, name, bool(passed), detail, time.perf_counter() - start)


def regret_rate(ctx: Context):
    res = ctx.regret_runs("epg")
    if res.failures:
        return False, f"{len(res.failures)} failed replications: {res.failures[0]}"
    slope, se = res.slope()
    lo, hi = ctx.scale.slope_epg
    return lo <= slope <= hi, f"slope {slope:.4f} (se {se:.4f}) over t={list(res.checkpoints)}, n={res.n}; need [{lo}, {hi}]"


def linear_control(ctx: Context):
    epg = ctx.regret_runs("epg")
    pe = ctx.regret_runs("pure-explore")
    if pe.failures or epg.failures:
        return False, "failed replications"
    slope, se = pe.slope()
    lo, hi = ctx.scale.slope_explore
    ratio = epg.mean()[-1] / pe.mean()[-1]
    ok = lo <= slope <= hi and ratio <= ctx.scale.regret_ratio
    return ok, (f"pure-explore slope {slope:.4f} (se {se:.4f}) need [{lo}, {hi}]; "
                f"regret ratio at t={epg.checkpoints[-1]} {ratio:.4f} need <= {ctx.scale.regret_ratio}")


def estimation_coverage(ctx: Context):
    sc = ctx.scale
    res = run_replications(ctx.env, ctx.seeds(sc.n_coverage, offset=1), algorithm="pure-explore",
                           T=sc.T_estimation, checkpoints=[sc.T_estimation], jobs=ctx.jobs)
    freq = float(res.violation_frequency("thm31")[-1])
    delta = ctx.env.config.run.delta_estimation
    limit = binomial_limit(delta, res.n)
    return freq <= limit and not res.failures, (
        f"violation frequency {freq:.4f} over n={res.n} at T={sc.T_estimation}, delta={delta}; need <= {limit:.4f}")


def uniform_coverage(ctx: Context):
    env = ctx.env
    sc = ctx.scale
    _, last = env.margin_window
    if last is None:
        return False, "exploration margin never positive for T <= 10^4"
    res = run_replications(env, ctx.seeds(sc.n_coverage, offset=2), algorithm="epg", T=last,
                           checkpoints=[last], jobs=ctx.jobs)
    app = int(res.thm32_applicable[:, -1].sum())
    if app == 0:
        return False, f"bound not applicable at T={last}"
    freq = float(res.violation_frequency("thm32")[-1])
    delta = env.config.run.delta_uniform
    p = math.pi**2 / 3.0 * delta
    limit = binomial_limit(p, app)
    return freq <= limit and not res.failures, (
        f"violation frequency {freq:.4f} over {app} applicable runs at T={last} (largest T <= 10^4 with M > 0), "
        f"delta={delta}; need <= {limit:.4f}")


def _loss_families():
    """One log-likelihood loss (two segments, W beyond the natural range) and one least-squares loss."""
    iv = ActionInterval(0.2, 1.2)
    kern = SegmentAffineKernel(2)
    link = LogisticLink()
    c1, c2 = glm_constants(link, 2.0)
    glm_loss = GlmLogLikLoss(GlmSpec(kern, link), 2.0, c1, c2, interval=iv)
    ls_loss = LeastSquaresLoss(kern, 0.0, 1.0, 0.8, 1.25, 0.8)
    return iv, [("glm_loglik", glm_loss, (0.0, 1.0)), ("least_squares", ls_loss, None)]


def hessian_dominance(ctx: Context):
    rng = np.random.default_rng(5)
    iv, fams = _loss_families()
    worst = {}
    n = ctx.scale.n_samples
    for name, loss, support in fams:
        m = math.inf
        for _ in range(n):
            theta = rng.normal(0.0, 3.0, loss.d)
            x = int(rng.integers(2))
            a = rng.uniform(iv.lo, iv.hi)
            y = float(rng.choice(support)) if support else rng.uniform(0.0, 1.0)
            _, _, hess = loss.terms(theta, x, a, y)
            m = min(m, float(np.linalg.eigvalsh(hess - loss.information(x, a))[0]))
        worst[name] = m
    ok = all(v >= -1e-9 for v in worst.values())
    return ok, ", ".join(f"{k}: min eig {v:.3e}" for k, v in worst.items()) + f" over {n} draws each; need >= -1e-9"


def subgaussian_compatibility(ctx: Context):
    env = ctx.env
    rng = np.random.default_rng(6)
    n = ctx.scale.n_samples
    worst = -math.inf
    bad = 0
    for _ in range(n):
        x = int(rng.integers(len(env.space)))
        a = rng.uniform(env.interval.lo, env.interval.hi)
        u = rng.normal(size=env.d)
        lam = u / np.linalg.norm(u) * 10.0 * rng.random()
        lhs, rhs, ok = check_subgaussian_compatibility(env.model, env.loss, x, a, lam)
        worst = max(worst, lhs / rhs - 1.0)
        bad += not ok
    return bad == 0, f"{bad} failures in {n} draws on {env.name}; max lhs/rhs - 1 = {worst:.3e} (tolerance 1e-12)"


def grid_oracle(objective, lo=-3.0, hi=3.0, coarse=1e-2, fine=1e-3):
    """Minimise a function of two variables by exhaustive grids then Nelder-Mead."""
    g = np.arange(lo, hi + coarse / 2, coarse)
    A, B = np.meshgrid(g, g, indexing="ij")
    vals = objective(np.stack([A.ravel(), B.ravel()], axis=1))
    i = int(np.argmin(vals))
    c = np.array([A.ravel()[i], B.ravel()[i]])
    g2 = np.arange(-10 * fine, 10 * fine + fine / 2, fine)
    A2, B2 = np.meshgrid(c[0] + g2, c[1] + g2, indexing="ij")
    pts = np.stack([A2.ravel(), B2.ravel()], axis=1)
    vals2 = objective(pts)
    start = pts[int(np.argmin(vals2))]
    res = optimize.minimize(lambda th: float(objective(th[None, :])[0]), start, method="Nelder-Mead",
                            options={"xatol": 1e-11, "fatol": 1e-15, "maxiter": 20000})
    return res.x


def mini_glm_loss():
    iv = ActionInterval(0.2, 1.2)
    kern = SegmentAffineKernel(1)
    link = LogisticLink()
    W = 2.0
    c1, c2 = glm_constants(link, W)
    return iv, GlmLogLikLoss(GlmSpec(kern, link), W, c1, c2, interval=iv)


def erm_oracle(ctx: Context):
    iv, loss = mini_glm_loss()
    theta_star = np.array([1.0, -1.5])
    worst = 0.0
    for k in range(ctx.scale.n_datasets):
        rng = np.random.default_rng(100 + k)
        a = rng.uniform(iv.lo, iv.hi, 50)
        y = (rng.random(50) < 1.0 / (1.0 + np.exp(-(theta_star[0] + theta_star[1] * a)))).astype(float)

        def objective(thetas):
            w = thetas[:, :1] + thetas[:, 1:] * a[None, :]
            bt, _, _ = link_extension_btilde(loss.link, loss.W, w)
            return loss.scale * np.sum(bt - y[None, :] * w, axis=1) + 0.5 * np.sum(thetas**2, axis=1)

        ref = grid_oracle(objective)
        state = ErmState(loss)
        for t, (ai, yi) in enumerate(zip(a, y), 1):
            state.ingest(Observation(t, 0, float(ai), float(yi), True))
        theta, _ = state.fit()
        worst = max(worst, float(np.linalg.norm(theta - ref)))
    return worst <= 1e-4, f"max |theta_newton - theta_grid| = {worst:.3e} over {ctx.scale.n_datasets} datasets; need <= 1e-4"


def _five_point(f, x, h):
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


def gradient_fidelity(ctx: Context):
    rng = np.random.default_rng(8)
    n = ctx.scale.n_gradient_points
    report = []
    ok = True
    for name in SHIPPED:
        env = build_environment(load_config(name)) if name != ctx.env.name else ctx.env
        m, r, iv = env.model, env.reward, env.interval
        h = 1e-3
        worst = 0.0
        for _ in range(n):
            x = int(rng.integers(len(env.space)))
            a = rng.uniform(iv.lo + 2 * h, iv.hi - 2 * h)
            theta = m.theta_star + rng.normal(0.0, 0.3, env.d)
            an = m.grad_a_expected_reward(theta, r, x, a)
            fd = _five_point(lambda s: m.expected_reward(theta, r, x, s), a, h)
            worst = max(worst, abs(fd - an) / max(abs(an), 1e-8))
        ok &= worst <= 1e-6
        report.append(f"d/da reward {name}: {worst:.2e}")
    iv, fams = _loss_families()
    h = 1e-4
    for name, loss, support in fams:
        worst = 0.0
        for _ in range(n):
            theta = rng.normal(0.0, 2.0, loss.d)
            x = int(rng.integers(2))
            a = rng.uniform(iv.lo, iv.hi)
            y = float(rng.choice(support)) if support else rng.uniform(0.0, 1.0)
            _, an, _ = loss.terms(theta, x, a, y)
            fd = np.empty(loss.d)
            for k in range(loss.d):
                e = np.zeros(loss.d)
                e[k] = 1.0
                fd[k] = _five_point(lambda s: loss.terms(theta + s * e, x, a, y)[0], 0.0, h)
            worst = max(worst, float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-8)))
        ok &= worst <= 1e-6
        report.append(f"d/dtheta loss {name}: {worst:.2e}")
    return ok, "max relative error " + "; ".join(report) + f" ({n} points each); need <= 1e-6"


def recursion_check(ctx: Context):
    res = ctx.regret_runs("epg")
    total = sum(res.lemma44_violations)
    steps = sum(res.lemma44_checked)
    return total == 0 and steps > 0 and not res.failures, (
        f"{total} violating steps out of {steps} checked across {res.n} runs (every segment each step)")


def determinism(ctx: Context):
    from .cli import main

    cfg = str(shipped_path("logit-2seg")) if str(ctx.config) == "logit-2seg" else str(ctx.config)
    commands = [
        ["run", "--config", cfg, "--seed", "7", "--T", "1500", "--checkpoints", "500,1000,1500"],
        ["run", "--config", cfg, "--seed", "7", "--T", "600", "--algorithm", "eps-greedy", "--full-trace"],
        ["run", "--config", cfg, "--seed", "7", "--T", "600", "--algorithm", "pure-explore", "--full-trace"],
        ["replicate", "--config", cfg, "--seed", "3", "--n-seeds", "3", "--T", "800", "--checkpoints", "400,800"],
    ]
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, cmd in enumerate(commands):
            outs = []
            for rep in range(2):
                out = Path(tmp) / f"c{i}_{rep}"
                try:
                    main(cmd + ["--out", str(out)], standalone_mode=False)
                except SystemExit as exc:
                    if exc.code not in (0, None):
                        mismatched.append(f"{' '.join(cmd[:1])} exited {exc.code}")
                outs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
            if outs[0] != outs[1] or not outs[0]:
                mismatched.append(cmd[0] + " " + cmd[-1])
    return not mismatched, (f"{len(commands)} commands run twice; " +
                            ("all CSV outputs byte-identical" if not mismatched else f"differ: {mismatched}"))


def schedule_sandwich(ctx: Context):
    details = []
    ok = True
    for name in SHIPPED:
        env = build_environment(load_config(name))
        s = env.schedule
        T, ratio = sandwich_ratios(s.c, s.d, s.burn_in, 100000)
        within = bool(np.all((ratio >= s.c_lo) & (ratio <= s.c_hi)))
        ok &= within and s.horizon >= 100000
        details.append(f"{name}: c={s.c:g}, T in [{T[0]}, {T[-1]}], ratio in [{ratio.min():.4f}, {ratio.max():.4f}] "
                       f"vs [{s.c_lo:g}, {s.c_hi:g}]")
    return ok, "; ".join(details)


CRITERIA = [
    (1, "regret rate", regret_rate),
    (2, "linear-regret control", linear_control),
    (3, "estimation bound coverage", estimation_coverage),
    (4, "uniform bound coverage", uniform_coverage),
    (5, "hessian dominance", hessian_dominance),
    (6, "sub-gaussian compatibility", subgaussian_compatibility),
    (7, "erm oracle equivalence", erm_oracle),
    (8, "gradient fidelity", gradient_fidelity),
    (9, "suboptimality recursion", recursion_check),
    (10, "determinism", determinism),
    (11, "schedule sandwich", schedule_sandwich),
]


def run_criterion(number: int, ctx: Context) -> CriterionResult:
    for num, name, fn in CRITERIA:
        if num == number:
            return _timed(num, name, fn, ctx)
    raise KeyError(number)


def run_acceptance(ctx: Context, only=None, echo=print) -> list[CriterionResult]:
    """Run criteria in order; a failing or crashing criterion never stops the rest."""
    results = []
    for num, name, fn in CRITERIA:
        if only and num not in only:
            continue
        res = _timed(num, name, fn, ctx)
        results.append(res)
        if echo:
            echo(res.line(ctx.scale.label))
    return results
