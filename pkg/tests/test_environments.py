import pytest

from epg_pricing.core import ConfigError
from epg_pricing.environments import (
    SHIPPED,
    apply_overrides,
    build_environment,
    load_config,
    parse_config,
    validate_run_grid,
)


def build(**overrides):
    return build_environment(apply_overrides(load_config("logit-2seg"), overrides))


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_certificates_pass(name):
    env = build_environment(load_config(name))
    assert env.certificate.ok
    assert env.schedule.burn_in <= 500
    lo, hi = env.interval.lo, env.interval.hi
    for a, _ in env.certificate.best_actions:
        assert lo < a < hi
    assert env.constants.gamma_a > 0


def test_shipped_logit_margin_window(logit_env):
    first, last = logit_env.margin_window
    assert first is not None and first <= last <= 10_000


def test_truth_outside_natural_range_rejected():
    with pytest.raises(ConfigError, match="theta_star"):
        build(**{"model.theta_star": [9.0, -4.0, 3.09, -4.0]})


def test_step_size_above_smoothness_limit_rejected(logit_env):
    with pytest.raises(ConfigError, match="1/L_a"):
        build(**{"step.eta_fraction": None, "step.eta": 2.0 / logit_env.constants.L_a})


def test_step_size_needs_exactly_one_form():
    cfg = load_config("logit-2seg").model_dump()
    cfg["step"] = {"eta": 0.1, "eta_fraction": 0.5}
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config(cfg)


def test_strict_exploration_constant_fails():
    with pytest.raises(ConfigError, match=r"exploration constant 30\*C_H/rho_H"):
        build_environment(load_config("logit-2seg"), strict=True)
    with pytest.raises(ConfigError, match="exploration constant"):
        build(**{"schedule.require_exploration_constant": True})


def test_exploration_constant_reported_when_not_enforced(logit_env):
    check = {c.name: c for c in logit_env.certificate.checks}["exploration_constant"]
    assert not check.passed and not check.fatal
    assert logit_env.exploration_constant == pytest.approx(30 * logit_env.constants.C_H / logit_env.constants.rho_H)


def test_single_point_kernel_rejected():
    with pytest.raises(ConfigError, match="fewer than 2 distinct actions"):
        build(**{"kernel.kind": "discrete_grid", "kernel.points": [0.7]})


def test_unknown_field_rejected():
    cfg = load_config("logit-2seg").model_dump()
    cfg["model"]["theta"] = [1.0]
    with pytest.raises(ConfigError, match="model.theta"):
        parse_config(cfg)


def test_weights_must_sum_to_one():
    with pytest.raises(ConfigError, match="sum"):
        build(**{"segments.weights": [0.6, 0.5]})


def test_initial_policy_outside_interval():
    with pytest.raises(ConfigError, match="policy.initial"):
        build(**{"policy.initial": [0.1, 0.5]})


def test_gaussian_needs_noise():
    cfg = load_config("gauss-1seg")
    with pytest.raises(ConfigError, match="noise_sd"):
        build_environment(apply_overrides(cfg, {"model.noise_sd": None}))


@pytest.mark.parametrize(
    "T, marks, message",
    [(50, [100], "checkpoint beyond horizon"), (100, [50, 50], "strictly increasing"), (10, [0], ">= 1")],
)
def test_run_grid_validation(T, marks, message):
    with pytest.raises(ConfigError, match=message):
        validate_run_grid(T, marks)


def test_missing_config_file():
    with pytest.raises(FileNotFoundError):
        load_config("no-such-env.yaml")


def test_overrides_revalidate():
    cfg = apply_overrides(load_config("logit-2seg"), {"run.T_max": 123, "run.checkpoints": [100, 123]})
    assert cfg.run.T_max == 123
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"run.T_max": "many"})
