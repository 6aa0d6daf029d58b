"""Environment configuration files and assembly of a certified environment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core import ActionInterval, ConfigError, ModelConstants, SegmentSpace
from .erm import UNIFORM_DELTA_MAX
from .losses import GlmLogLikLoss, LeastSquaresLoss, LossSpec
from .models import (
    GaussianLink,
    GlmSpec,
    LogisticLink,
    ResponseModel,
    RewardFunction,
    SegmentAffineKernel,
    glm_constants,
    margin_reward,
    validate_reward,
)
from .policy import (
    Certificate,
    Check,
    EpsilonSchedule,
    ExplorationKernel,
    certify_constants,
    default_burn_in,
    first_positive_margin,
    last_positive_margin,
)

SHIPPED = ("logit-2seg", "gauss-1seg")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SegmentsConfig(_Section):
    ids: list[str]
    weights: list[float]
    costs: list[float]


class ActionsConfig(_Section):
    lo: float
    hi: float


class ModelConfig(_Section):
    kind: Literal["logistic", "gaussian"]
    theta_star: list[float]
    W: float
    noise_sd: Optional[float] = None
    response_bounds: Optional[tuple[float, float]] = None


class LossConfig(_Section):
    kind: Literal["glm_loglik", "least_squares"]
    c1: Optional[float] = None
    c2: Optional[float] = None
    dominating_scale: Optional[float] = None


class RewardConfig(_Section):
    kind: Literal["margin"] = "margin"


class KernelConfig(_Section):
    kind: Literal["uniform_on_interval", "discrete_grid"] = "uniform_on_interval"
    points: Optional[list[float]] = None


class ScheduleConfig(_Section):
    c: float
    c1: float
    c2: float
    burn_in: Optional[int] = None
    horizon: int = 100000
    require_exploration_constant: bool = False


class StepConfig(_Section):
    eta: Optional[float] = None
    eta_fraction: Optional[float] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.eta is None) == (self.eta_fraction is None):
            raise ValueError("give exactly one of eta or eta_fraction")
        return self


class PolicyConfig(_Section):
    initial: Optional[list[float]] = None


class RunConfig(_Section):
    T_max: int = 50000
    checkpoints: list[int] = Field(default_factory=lambda: [5000, 10000, 20000, 50000])
    delta_estimation: float = 0.05
    delta_uniform: float = 0.01
    greedy_grid: int = 101
    solve_every: int = 1
    full_trace: bool = False
    seeds: list[int] = Field(default_factory=lambda: list(range(20)))


class CertifyConfig(_Section):
    theta_norm_bound: float
    probe_points: int = 2001
    quad_points: int = 10001
    stability_samples: int = 1000


class EnvironmentConfig(_Section):
    name: str
    segments: SegmentsConfig
    actions: ActionsConfig
    model: ModelConfig
    loss: LossConfig
    reward: RewardConfig = Field(default_factory=RewardConfig)
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    schedule: ScheduleConfig
    step: StepConfig
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    certify: CertifyConfig


def _flatten_errors(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: dict) -> EnvironmentConfig:
    try:
        return EnvironmentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_flatten_errors(exc)) from None


def shipped_path(name: str) -> Path:
    return Path(str(resources.files("epg_pricing") / "envs" / f"{name}.yaml"))


def load_config(path_or_name: str | Path) -> EnvironmentConfig:
    """Read a YAML config file; a bare shipped name such as ``logit-2seg`` also works."""
    path = Path(path_or_name)
    if not path.exists() and str(path_or_name) in SHIPPED:
        path = shipped_path(str(path_or_name))
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path_or_name}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path}: top level must be a mapping")
    return parse_config(data)


@dataclass
class Environment:
    """Everything a run needs, built and certified from one config."""

    config: EnvironmentConfig
    space: SegmentSpace
    interval: ActionInterval
    model: ResponseModel
    reward: RewardFunction
    loss: LossSpec
    kernel: ExplorationKernel
    schedule: EpsilonSchedule
    constants: ModelConstants
    certificate: Certificate
    eta: float
    initial_policy: np.ndarray
    exploration_constant: float
    margin_window: tuple[int | None, int | None]

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def name(self) -> str:
        return self.config.name


def _build_loss(cfg: EnvironmentConfig, glm: GlmSpec, interval: ActionInterval) -> LossSpec:
    m, lc = cfg.model, cfg.loss
    if lc.kind == "glm_loglik":
        c1, c2 = glm_constants(glm.link, m.W)
        for name, derived in (("c1", c1), ("c2", c2)):
            given = getattr(lc, name)
            if given is not None and not math.isclose(given, derived, rel_tol=1e-9):
                raise ConfigError(
                    f"loss.{name}={given!r} disagrees with the value {derived!r} implied by the link and W"
                )
        return GlmLogLikLoss(glm, m.W, c1, c2, interval=interval)
    if m.response_bounds is None:
        raise ConfigError("model.response_bounds: required for the least_squares loss")
    if lc.c1 is None or lc.c2 is None or lc.dominating_scale is None:
        raise ConfigError("loss: least_squares needs c1, c2 and dominating_scale")
    if m.kind != "gaussian":
        raise ConfigError("loss.kind least_squares is only wired for the gaussian model")
    y_lo, y_hi = m.response_bounds
    if lc.c1 > lc.c2:
        raise ConfigError(f"loss: need c1 <= c2, got c1={lc.c1!r} c2={lc.c2!r}")
    return LeastSquaresLoss(glm.kernel, y_lo, y_hi, lc.c1, lc.c2, lc.dominating_scale)


def build_environment(cfg: EnvironmentConfig, strict: bool = False) -> Environment:
    """Construct and certify every component; raises :class:`ConfigError` naming the field at fault.

    ``strict`` (or ``schedule.require_exploration_constant``) makes the exploration
    constant check ``c1 >= 30 C_H / rho_H`` fatal; otherwise it is reported only.
    """
    sc = cfg.segments
    space = SegmentSpace(tuple(sc.ids), tuple(sc.weights), tuple(sc.costs))
    interval = ActionInterval(cfg.actions.lo, cfg.actions.hi)
    m = cfg.model
    if not m.W > 0:
        raise ConfigError(f"model.W must be > 0, got {m.W!r}")
    if m.kind == "logistic":
        link = LogisticLink()
        y_abs = 1.0
        y_bounds = None
    else:
        if m.noise_sd is None:
            raise ConfigError("model.noise_sd: required for the gaussian model")
        link = GaussianLink(m.noise_sd)
        y_bounds = tuple(m.response_bounds) if m.response_bounds is not None else None
        if y_bounds is None:
            raise ConfigError("model.response_bounds: required for the gaussian model (responses are clipped)")
        y_abs = max(abs(y_bounds[0]), abs(y_bounds[1]))
    kern = SegmentAffineKernel(len(space))
    glm = GlmSpec(kern, link)
    model = ResponseModel(glm, m.theta_star, interval, space, y_bounds=y_bounds)
    bad = model.containment_violations(m.W)
    if bad:
        sid, a, w = max(bad, key=lambda b: abs(b[2]))
        raise ConfigError(
            f"model.theta_star: natural parameter leaves [-W, W] (W={m.W}) at segment {sid!r}, a={a:.6g}: "
            f"psi theta* = {w:.6g} ({len(bad)} probe points)"
        )
    reward = margin_reward(space.costs, y_abs, interval)
    validate_reward(model, reward)
    loss = _build_loss(cfg, glm, interval)
    if isinstance(loss, LeastSquaresLoss):
        viol = loss.sandwich_violations(model.theta_star, len(space), interval.grid(101))
        if viol:
            raise ConfigError("loss.dominating_scale: " + viol[0])
    kernel = ExplorationKernel(cfg.kernel.kind, interval, cfg.kernel.points)

    cc = cfg.certify
    cert = certify_constants(model, reward, kernel, space, loss, cc.theta_norm_bound, m.W,
                             n_probe=cc.probe_points, n_quad=cc.quad_points, n_theta=cc.stability_samples)
    consts = cert.constants
    if not cert.ok:
        f = cert.failures()[0]
        where = ""
        if cert.pl_violations:
            sid, a, r = cert.pl_violations[0]
            where = f" (first at segment {sid!r}, a={a:.6g}, ratio {r:.3e})"
        raise ConfigError(f"certify: {f.name} failed: {f.detail}{where}")

    st = cfg.step
    if st.eta is not None:
        eta = st.eta
        label = f"step.eta={eta!r}"
    else:
        eta = st.eta_fraction / consts.L_a
        label = f"step.eta_fraction={st.eta_fraction!r}"
    if not (eta > 0 and eta <= 1.0 / consts.L_a * (1 + 1e-12)):
        raise ConfigError(f"{label}: step size {eta!r} must lie in (0, 1/L_a] = (0, {1.0 / consts.L_a!r}]")

    d = model.d
    sch = cfg.schedule
    burn_in = sch.burn_in if sch.burn_in is not None else default_burn_in(consts.rho_H, consts.C_H, d)
    schedule = EpsilonSchedule(sch.c, d, burn_in, sch.horizon, sch.c1, sch.c2)
    exploration_constant = 30.0 * consts.C_H / consts.rho_H
    enforce = strict or sch.require_exploration_constant
    constant_ok = sch.c1 >= exploration_constant
    cert.checks.append(Check(
        "exploration_constant",
        constant_ok,
        f"schedule.c1={sch.c1!r} vs exploration constant 30*C_H/rho_H={exploration_constant!r}",
        fatal=enforce,
    ))
    if enforce and not constant_ok:
        raise ConfigError(
            f"schedule.c1={sch.c1!r} below the exploration constant 30*C_H/rho_H={exploration_constant!r}"
        )
    cert.checks.append(Check(
        "exploration_sandwich", True,
        f"c={schedule.c!r} (requested {schedule.requested_c!r}), ratio range "
        f"[{schedule.ratio_range[0]:.6g}, {schedule.ratio_range[1]:.6g}] within "
        f"[{sch.c1}, {sch.c2}] for T in [{burn_in + 1}, {sch.horizon}]",
    ))

    rc = cfg.run
    if not 0 < rc.delta_estimation < 1:
        raise ConfigError(f"run.delta_estimation={rc.delta_estimation!r} outside (0, 1)")
    if not 0 < rc.delta_uniform <= UNIFORM_DELTA_MAX:
        raise ConfigError(f"run.delta_uniform={rc.delta_uniform!r} outside (0, 3/pi^2]")
    validate_run_grid(rc.T_max, rc.checkpoints)
    if rc.solve_every < 1:
        raise ConfigError(f"run.solve_every must be >= 1, got {rc.solve_every}")
    if rc.greedy_grid < 2:
        raise ConfigError(f"run.greedy_grid must be >= 2, got {rc.greedy_grid}")

    if cfg.policy.initial is None:
        phi0 = np.full(len(space), 0.5 * (interval.lo + interval.hi))
    else:
        if len(cfg.policy.initial) != len(space):
            raise ConfigError(f"policy.initial: need {len(space)} actions, got {len(cfg.policy.initial)}")
        phi0 = np.array(cfg.policy.initial, dtype=float)
        for sid, a in zip(space.ids, phi0):
            if not interval.contains(a):
                raise ConfigError(f"policy.initial: action {a!r} for segment {sid!r} outside the interval")

    limit = min(sch.horizon, 10000)
    first = first_positive_margin(schedule.partial_sum, consts.rho_H, consts.C_H, d, rc.delta_uniform, limit)
    last = last_positive_margin(schedule.partial_sum, consts.rho_H, consts.C_H, d, rc.delta_uniform, limit)
    return Environment(cfg, space, interval, model, reward, loss, kernel, schedule, consts, cert, eta, phi0,
                       exploration_constant, (first, last))


def validate_run_grid(T_max: int, checkpoints) -> None:
    if T_max < 0:
        raise ConfigError(f"run.T_max must be >= 0, got {T_max}")
    for c in checkpoints:
        if c < 1:
            raise ConfigError(f"checkpoint {c} must be >= 1")
        if c > T_max:
            raise ConfigError(f"checkpoint beyond horizon: {c} > T_max={T_max}")
    if list(checkpoints) != sorted(set(checkpoints)):
        raise ConfigError(f"checkpoints must be strictly increasing, got {list(checkpoints)}")


def load_environment(path_or_name, strict: bool = False, overrides: dict | None = None) -> Environment:
    cfg = load_config(path_or_name)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return build_environment(cfg, strict=strict)


def apply_overrides(cfg: EnvironmentConfig, overrides: dict) -> EnvironmentConfig:
    """Return a copy with dotted-key overrides (``{"run.T_max": 5000}``) applied and revalidated."""
    data = cfg.model_dump()
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return parse_config(data)
