"""The exploration/policy-gradient pricing loop, its baselines, regret accounting,
per-checkpoint diagnostics and Monte Carlo replication."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import ConfigError, Observation, RandomStream, sample_segment
from .environments import Environment, EnvironmentConfig, build_environment, validate_run_grid
from .erm import ErmState, SolverError, estimation_error_bound, exploration_margin, uniform_error_bound
from .policy import Policy, oracle_best_action, pg_update

ALGORITHMS = ("epg", "eps-greedy", "pure-explore", "oracle")

COLUMNS = (
    "t", "x", "explored", "a", "y", "regret_increment", "cum_regret", "theta_err_sq", "rho_min_V",
    "thm31_bound", "thm31_ok", "thm32_bound", "thm32_applicable", "lemma44_ok",
)
NA = "NA"
LEMMA_TOL = 1e-12


def format_value(v) -> str:
    """CSV cell: ints as digits, floats by ``repr`` (round-trip exact), booleans 1/0, ``None`` as NA."""
    if v is None:
        return NA
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_row(row) -> str:
    return ",".join(format_value(v) for v in row)


def header() -> str:
    return ",".join(COLUMNS)


@dataclass
class RunTrace:
    """Rows at the recorded steps plus whole-run summaries."""

    algorithm: str
    seed: int
    T: int
    rows: list = field(default_factory=list)
    cum_regret: float = 0.0
    final_policy: list = field(default_factory=list)
    final_theta: list = field(default_factory=list)
    explored_steps: int = 0
    epsilon_sum: float = 0.0
    lemma44_checked: int = 0
    lemma44_violations: int = 0
    solver_calls: int = 0
    solver_iterations: int = 0
    max_grad_norm: float = 0.0
    first_positive_margin: int | None = None
    wall_seconds: float = 0.0

    def row_at(self, t: int):
        for r in self.rows:
            if r[0] == t:
                return r
        raise KeyError(t)

    def column(self, name: str) -> list:
        i = COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def summary(self) -> dict:
        last = self.rows[-1] if self.rows else None
        out = {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "T": self.T,
            "final_cum_regret": self.cum_regret,
            "explored_steps": self.explored_steps,
            "epsilon_sum": self.epsilon_sum,
            "final_policy": " ".join(repr(float(a)) for a in self.final_policy),
            "final_theta": " ".join(repr(float(v)) for v in self.final_theta),
            "solver_calls": self.solver_calls,
            "solver_iterations": self.solver_iterations,
            "solver_max_final_grad_norm": self.max_grad_norm,
            "lemma44_steps_checked": self.lemma44_checked,
            "lemma44_violations": self.lemma44_violations,
            "first_positive_margin_T": self.first_positive_margin,
            "recorded_rows": len(self.rows),
        }
        if last is not None:
            for key in ("theta_err_sq", "thm31_bound", "thm31_ok", "thm32_bound", "thm32_applicable"):
                out[f"final_{key}"] = last[COLUMNS.index(key)]
        return out


class _Stepper:
    """Mutable state of one run; ``step`` performs the five loop actions in order."""

    def __init__(self, env: Environment, seed: int, algorithm: str, epsilon=None, inject_theta=None,
                 solve_every: int | None = None, greedy_grid: int | None = None):
        if algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        self.env = env
        self.algorithm = algorithm
        self.model, self.reward = env.model, env.reward
        rc = env.config.run
        self.solve_every = solve_every or rc.solve_every
        self.greedy = env.interval.grid(greedy_grid or rc.greedy_grid)
        self.epsilon = epsilon
        if algorithm == "pure-explore":
            self.epsilon = 1.0
        elif algorithm == "oracle":
            self.epsilon = 0.0
        self.inject = None if inject_theta is None else np.array(inject_theta, dtype=float)
        # one substream per source of randomness keeps algorithms coupled on common draws
        self.rng_seg, self.rng_xi, self.rng_explore, self.rng_response = RandomStream(seed).split(4)
        self.erm = ErmState(env.loss)
        self.policy = Policy(env.interval, env.initial_policy)
        theta_star = self.model.theta_star
        self.best = [oracle_best_action(self.model, self.reward, theta_star, x) for x in range(len(env.space))]
        self.best_value = np.array([v for _, v in self.best])
        self.sub = self._suboptimality(self.policy.table)
        self.tracks_policy = algorithm == "epg"
        # decisions of these algorithms never read the estimate, so fits happen only at recorded rows
        self.fits_each_step = algorithm in ("epg", "eps-greedy") and self.inject is None
        self.theta = np.zeros(env.d) if self.inject is None else self.inject.copy()
        self.cum_regret = 0.0
        self.eps_sum = 0.0
        self.explored = 0
        self.recursion_ok_since_row = True
        self.recursion_checked = 0
        self.recursion_violations = 0
        self.solver_calls = 0
        self.solver_iterations = 0
        self.max_grad_norm = 0.0
        self.first_positive = None
        self.t = 0

    def _suboptimality(self, table) -> np.ndarray:
        vals = np.array([self.model.expected_reward(self.model.theta_star, self.reward, x, float(a))
                         for x, a in enumerate(table)])
        return self.best_value - vals

    def _fit(self):
        theta, report = self.erm.fit()
        self.solver_calls += 1
        self.solver_iterations += report.iterations
        self.max_grad_norm = max(self.max_grad_norm, report.final_grad_norm)
        self.theta = theta

    def step(self, record: bool):
        env = self.env
        t = self.t = self.t + 1
        x = sample_segment(env.space, self.rng_seg)
        xi = self.rng_xi.uniform()
        eps = env.schedule.epsilon_at(t) if self.epsilon is None else self.epsilon
        self.eps_sum += eps
        explored = xi < eps
        if explored:
            a = env.kernel.sample(x, self.rng_explore)
            self.explored += 1
        elif self.algorithm == "epg":
            a = self.policy(x)
        elif self.algorithm == "eps-greedy":
            vals = self.model.expected_reward_grid(self.theta, self.reward, x, self.greedy)
            a = float(self.greedy[int(np.argmax(vals))])
        else:
            a = self.best[x][0] if self.algorithm == "oracle" else self.policy(x)
        y = self.model.sample_response(x, a, self.rng_response)
        increment = float(self.best_value[x] - self.model.expected_reward(self.model.theta_star, self.reward, x, a))
        self.cum_regret += increment

        self.erm.ingest(Observation(t, x, a, y, explored))
        if self.inject is None and (record or (self.fits_each_step and t % self.solve_every == 0)):
            self._fit()

        recursion_ok = None
        if self.tracks_policy:
            pg_update(self.policy, self.theta, env.eta, self.model, self.reward)
            sub = self._suboptimality(self.policy.table)
            c = env.constants
            err = float(np.sum((self.theta - self.model.theta_star) ** 2))
            rhs = (1.0 - c.gamma_a * env.eta) * self.sub + 0.5 * env.eta * c.L_theta**2 * err
            ok = bool(np.all(sub <= rhs + LEMMA_TOL))
            self.recursion_checked += 1
            if not ok:
                self.recursion_violations += 1
                self.recursion_ok_since_row = False
            self.sub = sub

        if self.first_positive is None:
            c = env.constants
            if exploration_margin(self.eps_sum, t, env.config.run.delta_uniform, c.rho_H, c.C_H, env.d) > 0:
                self.first_positive = t

        if not record:
            return None
        if self.tracks_policy:
            recursion_ok = self.recursion_ok_since_row
            self.recursion_ok_since_row = True
        return self._row(t, x, explored, a, y, increment, recursion_ok)

    def _row(self, t, x, explored, a, y, increment, recursion_ok):
        env = self.env
        rc = env.config.run
        c = env.constants
        theta_star = self.model.theta_star
        err = float(np.sum((self.theta - theta_star) ** 2))
        rho_min = float(np.linalg.eigvalsh(self.erm.V)[0])
        b31 = estimation_error_bound(self.erm.V, theta_star, rc.delta_estimation)
        b32 = uniform_error_bound(self.eps_sum, t, rc.delta_uniform, c.rho_H, c.C_H, env.d,
                                  float(theta_star @ theta_star))
        applicable = b32 is not None
        return (t, env.space.ids[x], explored, a, y, increment, self.cum_regret, err, rho_min,
                b31, err <= b31, b32, applicable, recursion_ok)


def default_checkpoints(env: Environment, T: int) -> list[int]:
    """Configured checkpoints up to ``T``, plus ``T`` itself."""
    marks = [c for c in env.config.run.checkpoints if c <= T]
    if T > 0 and (not marks or marks[-1] != T):
        marks.append(T)
    return marks


def run(env: Environment, seed: int, algorithm: str = "epg", T: int | None = None, checkpoints=None,
        full_trace: bool | None = None, sink=None, epsilon=None, inject_theta=None,
        solve_every: int | None = None, greedy_grid: int | None = None) -> RunTrace:
    """Simulate one run for ``T`` steps.

    Rows are recorded at ``checkpoints`` (every step with ``full_trace``).
    With a ``sink`` each row is handed over as it is produced and not kept,
    except checkpoint rows. Solver failures propagate as :class:`SolverError`.
    """
    rc = env.config.run
    T = rc.T_max if T is None else int(T)
    checkpoints = default_checkpoints(env, T) if checkpoints is None else list(checkpoints)
    validate_run_grid(T, checkpoints)
    full = rc.full_trace if full_trace is None else full_trace
    marks = set(checkpoints)
    start = time.perf_counter()
    stepper = _Stepper(env, seed, algorithm, epsilon, inject_theta, solve_every, greedy_grid)
    trace = RunTrace(algorithm, seed, T)
    for t in range(1, T + 1):
        row = stepper.step(record=full or t in marks)
        if row is None:
            continue
        if sink is not None:
            sink(row)
        if t in marks or sink is None:
            trace.rows.append(row)
    trace.cum_regret = stepper.cum_regret
    trace.final_policy = stepper.policy.table.tolist()
    trace.final_theta = stepper.theta.tolist()
    trace.explored_steps = stepper.explored
    trace.epsilon_sum = stepper.eps_sum
    trace.lemma44_checked = stepper.recursion_checked
    trace.lemma44_violations = stepper.recursion_violations
    trace.solver_calls = stepper.solver_calls
    trace.solver_iterations = stepper.solver_iterations
    trace.max_grad_norm = stepper.max_grad_norm
    trace.first_positive_margin = stepper.first_positive
    trace.wall_seconds = time.perf_counter() - start
    return trace


def baseline_epsilon_greedy(env: Environment, seed: int, **kwargs) -> RunTrace:
    """Same loop, but exploitation plays the grid argmax of the current estimate."""
    return run(env, seed, algorithm="eps-greedy", **kwargs)


def env_uniform_error_bound(eps_sum: float, T: int, delta: float, env: Environment) -> float | None:
    c = env.constants
    ts = env.model.theta_star
    return uniform_error_bound(eps_sum, T, delta, c.rho_H, c.C_H, env.d, float(ts @ ts))


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header() + "\n")
        for r in rows:
            fh.write(format_row(r) + "\n")


class TraceFile:
    """Streams rows to a CSV file as they are produced."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.fh.write(header() + "\n")

    def __call__(self, row):
        self.fh.write(format_row(row) + "\n")

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def seeds_from_master(master: int, n: int) -> list[int]:
    """``n`` distinct replication seeds derived from one master seed."""
    if n < 1:
        raise ConfigError("need at least one replication")
    state = np.random.SeedSequence(int(master)).generate_state(n, dtype=np.uint32)
    seeds = [int(s) for s in state]
    if len(set(seeds)) != n:
        raise ConfigError("derived seeds collide; pick another master seed")
    return seeds


@dataclass
class ExperimentResult:
    """Reductions over replications at a shared checkpoint grid."""

    algorithm: str
    checkpoints: list
    seeds: list
    regret: np.ndarray  # replications x checkpoints, rows sorted by seed
    thm31_ok: np.ndarray
    thm32_applicable: np.ndarray
    thm32_ok: np.ndarray
    lemma44_violations: list
    lemma44_checked: list
    final_regret: list
    failures: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.seeds)

    def mean(self) -> np.ndarray:
        return np.array([math.fsum(col) / len(col) for col in self.regret.T])

    def median(self) -> np.ndarray:
        return np.median(self.regret, axis=0)

    def ci95(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.mean()
        if self.n < 2:
            return m.copy(), m.copy()
        half = 1.96 * np.std(self.regret, axis=0, ddof=1) / math.sqrt(self.n)
        return m - half, m + half

    def slope(self, window=None) -> tuple[float, float]:
        """Least-squares slope of log mean regret against log t over ``window`` (inclusive bounds)."""
        ts = np.array(self.checkpoints, dtype=float)
        m = self.mean()
        keep = np.ones(ts.size, bool)
        if window is not None:
            keep = (ts >= window[0]) & (ts <= window[1])
        keep &= m > 0
        if keep.sum() < 2:
            raise ConfigError("slope fit needs at least two checkpoints with positive regret in the window")
        fit = stats.linregress(np.log(ts[keep]), np.log(m[keep]))
        return float(fit.slope), float(fit.stderr)

    def violation_frequency(self, which: str) -> np.ndarray:
        if which == "thm31":
            return 1.0 - self.thm31_ok.mean(axis=0)
        app = self.thm32_applicable.sum(axis=0)
        bad = (self.thm32_applicable & ~self.thm32_ok).sum(axis=0)
        return np.where(app > 0, bad / np.maximum(app, 1), np.nan)

    def table_rows(self):
        lo, hi = self.ci95()
        mean, med = self.mean(), self.median()
        f31 = self.violation_frequency("thm31")
        f32 = self.violation_frequency("thm32")
        napp = self.thm32_applicable.sum(axis=0)
        for i, t in enumerate(self.checkpoints):
            yield (t, self.n, mean[i], med[i], lo[i], hi[i], f31[i], int(napp[i]),
                   None if np.isnan(f32[i]) else f32[i])


TABLE_COLUMNS = ("t", "n", "mean_cum_regret", "median_cum_regret", "ci95_lo", "ci95_hi",
                 "thm31_violation_freq", "thm32_applicable_n", "thm32_violation_freq")


def reduce_traces(algorithm: str, checkpoints, traces, failures, keep_traces: bool = False) -> ExperimentResult:
    traces = sorted(traces, key=lambda tr: tr.seed)
    failures = sorted(failures)
    idx = [COLUMNS.index(k) for k in ("cum_regret", "thm31_ok", "thm32_applicable", "thm32_bound", "theta_err_sq")]

    def grab(tr, j):
        return [r[idx[j]] for r in tr.rows]

    k = len(checkpoints)
    regret = np.array([grab(tr, 0) for tr in traces], dtype=float).reshape(len(traces), k)
    ok31 = np.array([grab(tr, 1) for tr in traces], dtype=bool).reshape(len(traces), k)
    app = np.array([grab(tr, 2) for tr in traces], dtype=bool).reshape(len(traces), k)
    ok32 = np.zeros_like(app)
    for i, tr in enumerate(traces):
        for j, r in enumerate(tr.rows):
            b = r[COLUMNS.index("thm32_bound")]
            ok32[i, j] = b is not None and r[COLUMNS.index("theta_err_sq")] <= b
    return ExperimentResult(
        algorithm, list(checkpoints), [tr.seed for tr in traces], regret, ok31, app, ok32,
        [tr.lemma44_violations for tr in traces], [tr.lemma44_checked for tr in traces],
        [tr.cum_regret for tr in traces], failures, [tr.wall_seconds for tr in traces],
        traces if keep_traces else [],
    )


_WORKER_ENV: dict = {}


def _worker_run(args):
    cfg_json, strict, seed, kwargs = args
    env = _WORKER_ENV.get(cfg_json)
    if env is None:
        env = build_environment(EnvironmentConfig.model_validate_json(cfg_json), strict=strict)
        _WORKER_ENV.clear()
        _WORKER_ENV[cfg_json] = env
    try:
        return seed, run(env, seed, **kwargs), None
    except (SolverError, ArithmeticError) as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"


def run_replications(env: Environment, seeds, algorithm: str = "epg", T: int | None = None, checkpoints=None,
                     jobs: int = 1, keep_traces: bool = False, strict: bool = False, **kwargs) -> ExperimentResult:
    """Independent runs over ``seeds``; failed replications are recorded, not fatal.

    With ``jobs > 1`` runs go to worker processes, each rebuilding the
    environment from its config once. Results are reduced in seed order, so
    the outcome does not depend on ``jobs`` or on the order of ``seeds``.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    rc = env.config.run
    T = rc.T_max if T is None else int(T)
    checkpoints = default_checkpoints(env, T) if checkpoints is None else list(checkpoints)
    validate_run_grid(T, checkpoints)
    kw = dict(kwargs, algorithm=algorithm, T=T, checkpoints=checkpoints, full_trace=False)
    results = []
    if jobs <= 1:
        for s in seeds:
            try:
                results.append((s, run(env, s, **kw), None))
            except (SolverError, ArithmeticError) as exc:
                results.append((s, None, f"{type(exc).__name__}: {exc}"))
    else:
        cfg_json = env.config.model_dump_json()
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds), os.cpu_count() or 1)) as pool:
            results = list(pool.map(_worker_run, [(cfg_json, strict, s, kw) for s in seeds]))
    traces = [tr for _, tr, err in results if tr is not None]
    failures = [(s, err) for s, tr, err in results if tr is None]
    return reduce_traces(algorithm, checkpoints, traces, failures, keep_traces)
