import numpy as np
import pytest

from epg_pricing.core import ConfigError
from epg_pricing.engine import (
    COLUMNS,
    TraceFile,
    baseline_epsilon_greedy,
    format_row,
    header,
    run,
    run_replications,
    seeds_from_master,
)
from epg_pricing.policy import Policy, oracle_best_action, pg_update

GOLDEN_HEADER = ("t,x,explored,a,y,regret_increment,cum_regret,theta_err_sq,rho_min_V,"
                 "thm31_bound,thm31_ok,thm32_bound,thm32_applicable,lemma44_ok")


def col(trace, name):
    return np.array(trace.column(name))


def test_header_is_frozen():
    assert header() == GOLDEN_HEADER
    assert ",".join(COLUMNS) == GOLDEN_HEADER


def test_zero_horizon(logit_env, tmp_path):
    path = tmp_path / "trace.csv"
    with TraceFile(path) as sink:
        trace = run(logit_env, 0, T=0, sink=sink)
    assert trace.rows == [] and trace.cum_regret == 0.0
    assert path.read_text() == GOLDEN_HEADER + "\n"


def test_full_exploration_explores_every_step(logit_env):
    trace = run(logit_env, 1, T=300, full_trace=True, epsilon=1.0)
    assert col(trace, "explored").all()
    a = col(trace, "a").astype(float)
    assert a.min() >= 0.2 and a.max() <= 1.2


def test_no_exploration_plays_previous_policy(logit_env):
    env = logit_env
    theta = np.array([1.0, -1.0, 1.0, -1.0])
    trace = run(env, 1, T=50, full_trace=True, epsilon=0.0, inject_theta=theta)
    pol = Policy(env.interval, env.initial_policy)
    for sid, a in zip(trace.column("x"), trace.column("a")):
        assert a == pol(env.space.ids.index(sid))
        pg_update(pol, theta, env.eta, env.model, env.reward)
    assert not col(trace, "explored").any()


def test_oracle_has_negligible_regret(logit_env):
    T = 400
    trace = run(logit_env, 3, algorithm="oracle", T=T)
    assert 0 <= trace.cum_regret <= 1e-6 * T


def test_regret_increments_non_negative(logit_env):
    trace = run(logit_env, 2, T=500, full_trace=True)
    assert col(trace, "regret_increment").astype(float).min() >= -1e-12
    assert trace.lemma44_violations == 0
    assert trace.lemma44_checked == 500


def test_greedy_with_truth_matches_oracle(logit_env):
    env = logit_env
    trace = run(env, 4, algorithm="eps-greedy", T=200, full_trace=True, epsilon=0.0,
                inject_theta=env.model.theta_star)
    best = {sid: oracle_best_action(env.model, env.reward, env.model.theta_star, x)[0]
            for x, sid in enumerate(env.space.ids)}
    for sid, a in zip(trace.column("x"), trace.column("a")):
        assert abs(a - best[sid]) <= 1e-2


def test_injected_truth_keeps_regret_bounded(logit_env):
    env = logit_env
    short = run(env, 5, T=1000, epsilon=0.0, inject_theta=env.model.theta_star).cum_regret
    long = run(env, 5, T=4000, epsilon=0.0, inject_theta=env.model.theta_star).cum_regret
    assert long - short <= 1e-3


def test_same_seed_same_trace(logit_env):
    a = run(logit_env, 8, T=300, full_trace=True)
    b = run(logit_env, 8, T=300, full_trace=True)
    assert [format_row(r) for r in a.rows] == [format_row(r) for r in b.rows]


def test_greedy_and_epg_share_exploration(logit_env):
    a = run(logit_env, 6, algorithm="epg", T=400, full_trace=True)
    b = baseline_epsilon_greedy(logit_env, 6, T=400, full_trace=True)
    assert a.column("x") == b.column("x")
    assert a.column("explored") == b.column("explored")
    for ra, rb in zip(a.rows, b.rows):
        if ra[2]:
            assert ra[3] == rb[3]


def test_lemma_flag_not_applicable_to_baselines(logit_env):
    trace = run(logit_env, 1, algorithm="pure-explore", T=100)
    assert trace.column("lemma44_ok") == [None]
    assert format_row(trace.rows[-1]).endswith(",NA")


def test_missing_values_render_as_na():
    row = (3, "regular", True, 0.5, 1.0, 0.1, 0.2, 0.3, 2.0, 9.0, True, None, False, None)
    assert format_row(row) == "3,regular,1,0.5,1.0,0.1,0.2,0.3,2.0,9.0,1,NA,0,NA"


def test_unknown_algorithm(logit_env):
    with pytest.raises(ConfigError):
        run(logit_env, 0, algorithm="ucb", T=5)


def test_checkpoint_beyond_horizon(logit_env):
    with pytest.raises(ConfigError, match="checkpoint beyond horizon"):
        run(logit_env, 0, T=50, checkpoints=[100])


def test_replications_reduce_in_seed_order(logit_env):
    kw = dict(T=300, checkpoints=[100, 300])
    one = run_replications(logit_env, [3, 1, 2], **kw)
    two = run_replications(logit_env, [2, 3, 1], **kw)
    assert one.seeds == [1, 2, 3]
    assert np.array_equal(one.regret, two.regret)
    assert list(one.table_rows()) == list(two.table_rows())


def test_single_seed_reduction_is_the_trace(logit_env):
    res = run_replications(logit_env, [5], T=200, checkpoints=[100, 200], keep_traces=True)
    tr = res.traces[0]
    assert np.array_equal(res.mean(), np.array(tr.column("cum_regret")))
    assert np.array_equal(res.median(), res.mean())
    lo, hi = res.ci95()
    assert np.array_equal(lo, hi)


def test_parallel_matches_serial(logit_env):
    kw = dict(T=200, checkpoints=[100, 200])
    serial = run_replications(logit_env, [1, 2], **kw)
    parallel = run_replications(logit_env, [1, 2], jobs=2, **kw)
    assert np.array_equal(serial.regret, parallel.regret)


def test_three_seed_summary(logit_env):
    res = run_replications(logit_env, seeds_from_master(0, 3), T=100, checkpoints=[100])
    assert res.n == 3 and len(res.final_regret) == 3


def test_seed_derivation_is_stable():
    assert seeds_from_master(7, 5) == seeds_from_master(7, 5)
    assert len(set(seeds_from_master(7, 50))) == 50


def test_slope_of_linear_regret(logit_env):
    res = run_replications(logit_env, [1, 2], algorithm="pure-explore", T=2000, checkpoints=[250, 500, 1000, 2000])
    slope, _ = res.slope()
    assert 0.9 <= slope <= 1.1


def test_gaussian_environment_runs(gauss_env):
    trace = run(gauss_env, 1, T=500)
    assert trace.lemma44_violations == 0
    y = np.array(run(gauss_env, 1, T=100, full_trace=True).column("y"))
    assert y.min() >= 0.0 and y.max() <= 1.0


def test_greedy_baseline_within_sanity_band(logit_env):
    epg = run(logit_env, 1, T=5000).cum_regret
    greedy = baseline_epsilon_greedy(logit_env, 1, T=5000).cum_regret
    assert epg / 3 <= greedy <= 3 * epg
