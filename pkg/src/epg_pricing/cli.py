"""Command-line entry point: ``epg-pricing run|replicate|certify|accept|diff``.

Exit codes: 0 success, 1 experiment or criterion failure, 2 usage or config error.
The default output directory is ``$EPG_OUTPUT_DIR`` (falls back to ``./epg-out``).
"""

from __future__ import annotations

import csv
import os
import sys
import time
from pathlib import Path

import click

from .core import ConfigError
from .engine import (
    ALGORITHMS,
    TABLE_COLUMNS,
    TraceFile,
    format_row,
    format_value,
    run,
    run_replications,
    seeds_from_master,
)
from .environments import apply_overrides, build_environment, load_config
from .erm import SolverError

OUTPUT_ENV = "EPG_OUTPUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def default_output() -> str:
    return os.environ.get(OUTPUT_ENV, "epg-out")


def _int_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def _load(config: str, T: int | None, checkpoints: list[int] | None, strict: bool):
    """Parse and build; config problems exit 2 with the diagnostic verbatim."""
    try:
        cfg = load_config(config)
        overrides = {}
        if T is not None:
            overrides["run.T_max"] = T
            if checkpoints is None:
                overrides["run.checkpoints"] = [c for c in cfg.run.checkpoints if c <= T]
        if checkpoints is not None:
            overrides["run.checkpoints"] = checkpoints
        if overrides:
            cfg = apply_overrides(cfg, overrides)
        return build_environment(cfg, strict=strict)
    except FileNotFoundError as exc:
        _die(str(exc), EXIT_USAGE)
    except ConfigError as exc:
        _die(f"config error: {exc}", EXIT_USAGE)


def _die(message: str, code: int):
    click.echo(message, err=True)
    raise SystemExit(code)


def write_summary(path: Path, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={format_value(v)}\n")


def _outdir(out: str) -> Path:
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _die(f"output directory {out!r} not writable: {exc}", EXIT_USAGE)
    if not os.access(p, os.W_OK):
        _die(f"output directory {out!r} not writable", EXIT_USAGE)
    return p


config_option = click.option("--config", "config", required=True,
                             help="Environment YAML file, or a shipped name (logit-2seg, gauss-1seg).")
out_option = click.option("--out", "out", default=None, help=f"Output directory (default ${OUTPUT_ENV} or ./epg-out).")
T_option = click.option("--T", "T", type=int, default=None, help="Horizon override (run.T_max).")
ckpt_option = click.option("--checkpoints", default=None, help="Comma-separated recorded steps, e.g. 1000,5000.")
alg_option = click.option("--algorithm", type=click.Choice(ALGORITHMS), default="epg", show_default=True)
strict_option = click.option("--strict", is_flag=True,
                             help="Treat the exploration constant check c1 >= 30 C_H/rho_H as fatal.")


@click.group()
def main():
    """Simulate exploration plus policy-gradient pricing against known synthetic demand."""


@main.command("run")
@config_option
@click.option("--seed", type=int, default=0, show_default=True)
@out_option
@T_option
@ckpt_option
@alg_option
@click.option("--full-trace", is_flag=True, help="Record every step instead of checkpoints only.")
@click.option("--solve-every", type=int, default=None, help="Refit every k steps (default from config, 1 = every step).")
@strict_option
def cmd_run(config, seed, out, T, checkpoints, algorithm, full_trace, solve_every, strict):
    """One run: writes trace.csv and summary.txt."""
    env = _load(config, T, _int_list(checkpoints), strict)
    outdir = _outdir(out or default_output())
    full = full_trace or env.config.run.full_trace
    try:
        with TraceFile(outdir / "trace.csv") as sink:
            trace = run(env, seed, algorithm=algorithm, full_trace=full, sink=sink, solve_every=solve_every)
    except ConfigError as exc:
        _die(f"config error: {exc}", EXIT_USAGE)
    except (SolverError, ArithmeticError) as exc:
        _die(f"run failed: {type(exc).__name__}: {exc}", EXIT_FAIL)
    summary = {"env": env.name, **trace.summary(), "wall_seconds": round(trace.wall_seconds, 3)}
    write_summary(outdir / "summary.txt", summary)
    click.echo(f"{env.name} {algorithm} seed={seed} T={trace.T} cum_regret={trace.cum_regret:.6g} -> {outdir}")
    raise SystemExit(EXIT_OK)


@main.command("replicate")
@config_option
@click.option("--seed", type=int, default=None, help="Master seed; replication seeds are derived from it.")
@click.option("--n-seeds", type=int, default=None, help="Number of replications derived from --seed.")
@click.option("--seeds", "seed_list", default=None, help="Explicit comma-separated seeds (default: run.seeds).")
@out_option
@T_option
@ckpt_option
@alg_option
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker processes.")
@click.option("--window", default=None, help="Slope-fit window lo,hi (default: all checkpoints).")
@strict_option
def cmd_replicate(config, seed, n_seeds, seed_list, out, T, checkpoints, algorithm, jobs, window, strict):
    """Independent replications: writes replicate.csv and summary.txt."""
    env = _load(config, T, _int_list(checkpoints), strict)
    if seed_list is not None:
        seeds = _int_list(seed_list)
    elif n_seeds is not None:
        seeds = seeds_from_master(seed or 0, n_seeds)
    else:
        seeds = list(env.config.run.seeds)
    win = _int_list(window)
    if win is not None and len(win) != 2:
        _die("--window needs exactly two integers lo,hi", EXIT_USAGE)
    outdir = _outdir(out or default_output())
    start = time.perf_counter()
    try:
        res = run_replications(env, seeds, algorithm=algorithm, jobs=jobs, strict=strict)
    except ConfigError as exc:
        _die(f"config error: {exc}", EXIT_USAGE)
    with open(outdir / "replicate.csv", "w", newline="") as fh:
        fh.write(",".join(TABLE_COLUMNS) + "\n")
        for row in res.table_rows():
            fh.write(format_row(row) + "\n")
    summary = {"env": env.name, "algorithm": algorithm, "n": res.n, "failures": len(res.failures),
               "seeds": " ".join(str(s) for s in res.seeds)}
    for s, r in zip(res.seeds, res.final_regret):
        summary[f"final_cum_regret.seed{s}"] = r
    try:
        slope, se = res.slope(win)
        summary["slope"] = slope
        summary["slope_stderr"] = se
    except ConfigError as exc:
        summary["slope"] = None
        click.echo(f"slope not fitted: {exc}", err=True)
    summary["slope_window"] = " ".join(str(v) for v in (win or [res.checkpoints[0], res.checkpoints[-1]]))
    summary["thm31_violation_freq_final"] = float(res.violation_frequency("thm31")[-1])
    f32 = res.violation_frequency("thm32")[-1]
    summary["thm32_violation_freq_final"] = None if f32 != f32 else float(f32)
    summary["lemma44_violations_total"] = sum(res.lemma44_violations)
    for s, err in res.failures:
        summary[f"failure.seed{s}"] = err
    summary["wall_seconds_total"] = round(time.perf_counter() - start, 3)
    write_summary(outdir / "summary.txt", summary)
    click.echo(f"{env.name} {algorithm} n={res.n} failures={len(res.failures)} slope={format_value(summary['slope'])} -> {outdir}")
    raise SystemExit(EXIT_FAIL if res.failures else EXIT_OK)


@main.command("certify")
@config_option
@strict_option
def cmd_certify(config, strict):
    """Build the environment and print its certificate; exit 1 when any certificate fails."""
    try:
        cfg = load_config(config)
    except FileNotFoundError as exc:
        _die(str(exc), EXIT_USAGE)
    except ConfigError as exc:
        _die(f"config error: {exc}", EXIT_USAGE)
    try:
        env = build_environment(cfg, strict=strict)
    except ConfigError as exc:
        click.echo(f"certificate FAILED: {exc}")
        raise SystemExit(EXIT_FAIL)
    c = env.constants
    lines = [f"environment={env.name}", f"d={env.d}"]
    for name in ("c1", "c2", "C_H", "rho_H", "L_a", "gamma_a", "L_theta", "W", "theta_norm_bound"):
        lines.append(f"{name}={float(getattr(c, name))!r}")
    for name, res in env.certificate.resolution.items():
        lines.append(f"resolution.{name}={res}")
    lines.append(f"eta={env.eta!r}")
    lines.append(f"schedule.c={env.schedule.c!r}")
    lines.append(f"schedule.burn_in={env.schedule.burn_in}")
    first, last = env.margin_window
    lines.append(f"margin_positive_first_T={first}")
    lines.append(f"margin_positive_last_T={last}")
    lines.append(f"exploration_constant_30CH_over_rhoH={env.exploration_constant!r}")
    for (a, v), sid in zip(env.certificate.best_actions, env.space.ids):
        lines.append(f"optimum.{sid}={a!r} value={v!r}")
    for chk in env.certificate.checks:
        status = "pass" if chk.passed else ("FAIL" if chk.fatal else "advisory-fail")
        lines.append(f"check.{chk.name}={status} ({chk.detail})")
    click.echo("\n".join(lines))
    raise SystemExit(EXIT_OK if env.certificate.ok else EXIT_FAIL)


@main.command("accept")
@click.option("--config", "config", default="logit-2seg", show_default=True, help="Environment for the experiments.")
@click.option("--smoke", is_flag=True, help="Reduced scale (T=5000, 5 seeds) with widened tolerances.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--only", default=None, help="Comma-separated criterion numbers.")
def cmd_accept(config, smoke, jobs, only):
    """Run the acceptance criteria and print one PASS/FAIL line each."""
    from .acceptance import FULL, SMOKE, Context, run_acceptance

    if not Path(config).exists() and config not in ("logit-2seg", "gauss-1seg"):
        _die(f"config not found: {config}", EXIT_USAGE)
    try:
        load_config(config)
    except ConfigError as exc:
        _die(f"config error: {exc}", EXIT_USAGE)
    ctx = Context(config=config, scale=SMOKE if smoke else FULL, jobs=jobs)
    results = run_acceptance(ctx, only=set(_int_list(only)) if only else None, echo=click.echo)
    n_pass = sum(r.passed for r in results)
    click.echo(f"{n_pass}/{len(results)} criteria passed ({ctx.scale.label})")
    raise SystemExit(EXIT_OK if n_pass == len(results) else EXIT_FAIL)


def _read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@main.command("diff")
@click.argument("trace_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("trace_b", type=click.Path(exists=True, dir_okay=False))
def cmd_diff(trace_a, trace_b):
    """Compare two traces from the same seed and schedule.

    Passes (exit 0) when segments and exploration flags agree at every common
    step and actions agree on every exploration step, i.e. the runs diverge
    only where they exploit.
    """
    A, B = _read_trace(trace_a), _read_trace(trace_b)
    if not A or not B or set(A[0]) != set(B[0]):
        _die("traces are empty or have different columns", EXIT_USAGE)
    by_t = {r["t"]: r for r in B}
    common = [(r, by_t[r["t"]]) for r in A if r["t"] in by_t]
    if not common:
        _die("no common steps", EXIT_USAGE)
    identical = sum(ra == rb for ra, rb in common)
    draws = [ra["t"] for ra, rb in common if ra["x"] != rb["x"] or ra["explored"] != rb["explored"]]
    explore_div = [ra["t"] for ra, rb in common
                   if ra["explored"] == rb["explored"] == "1" and (ra["a"] != rb["a"] or ra["y"] != rb["y"])]
    exploit_div = [ra["t"] for ra, rb in common if ra["explored"] == rb["explored"] == "0" and ra["a"] != rb["a"]]
    click.echo(f"common_steps={len(common)}")
    click.echo(f"identical_rows={identical}")
    click.echo(f"segment_or_flag_mismatches={len(draws)}" + (f" first_t={draws[0]}" if draws else ""))
    click.echo(f"exploration_action_mismatches={len(explore_div)}" + (f" first_t={explore_div[0]}" if explore_div else ""))
    click.echo(f"exploitation_action_differences={len(exploit_div)}")
    ok = not draws and not explore_div
    click.echo("coupling=ok (divergence only on exploitation steps)" if ok else "coupling=BROKEN")
    raise SystemExit(EXIT_OK if ok else EXIT_FAIL)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
