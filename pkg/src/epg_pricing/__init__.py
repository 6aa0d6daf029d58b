"""Online pricing with forced exploration and policy-gradient exploitation,
simulated against known synthetic demand models."""

from .core import (
    ActionInterval,
    ConfigError,
    ModelConstants,
    NumericalError,
    Observation,
    RandomStream,
    SegmentSpace,
    project_action,
    sample_segment,
)
from .engine import ExperimentResult, RunTrace, baseline_epsilon_greedy, run, run_replications
from .environments import Environment, build_environment, load_config, load_environment
from .erm import ErmState, SolverError, SolverReport
from .policy import EpsilonSchedule, ExplorationKernel, Policy, certify_constants, oracle_best_action, pg_update

__all__ = [
    "ActionInterval", "ConfigError", "ModelConstants", "NumericalError", "Observation", "RandomStream",
    "SegmentSpace", "project_action", "sample_segment", "ExperimentResult", "RunTrace",
    "baseline_epsilon_greedy", "run", "run_replications", "Environment", "build_environment", "load_config",
    "load_environment", "ErmState", "SolverError", "SolverReport", "EpsilonSchedule", "ExplorationKernel",
    "Policy", "certify_constants", "oracle_best_action", "pg_update",
]
