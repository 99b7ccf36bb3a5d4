"""Command line entry point and output files.

``hydroldp <task> <config> [--seed N] [--out DIR]``

Exit codes: 0 success, 1 a verification reported FAIL or an output file
could not be written, 2 configuration error, 3 numerical blow-up,
4 minimum action did not converge.

Every run writes ``manifest.json`` (resolved configuration, defaults that
were filled in, package versions, seed, status, result summary and the list
of output files) plus task-specific tables and trajectories.  Wall-clock
time goes to ``timing.json`` so that every other file is byte-identical
across reruns with the same configuration and seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig, check_seed, parse_config
from .core import Trajectory, check_interpolation
from .galerkin import BlowUpError, apriori_moments, localization_levels, simulate_ensemble, time_increment_statistic
from .ldp import minimize_action, rate_scan
from .models import estimate_bound_constant, verify_antisymmetry
from .noise import check_sigma_conditions
from .skeleton import fit_loglog_slope, solve_skeleton, weak_convergence_scan

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BLOWUP, EXIT_NONCONV = 0, 1, 2, 3, 4


class OutputError(OSError):
    """An output file could not be written; the message carries the path."""


# -- serialization -------------------------------------------------------
def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def trajectory_records(traj: Trajectory, g, replicate: int | None = None) -> list[dict]:
    """One record per saved time: ``t``, coefficient ``[re, im]`` pairs, ``|u|`` and ``||u||``."""
    states = np.asarray(traj.states)
    h = np.sqrt(g.h_norm2(states))
    v = np.sqrt(g.v_norm2(states))
    recs = []
    for k, t in enumerate(traj.times):
        rec = {}
        if replicate is not None:
            rec["replicate"] = int(replicate)
        rec["t"] = float(t)
        u = states[k]
        rec["coeffs"] = [[float(np.real(c)), float(np.imag(c))] for c in u]
        rec["h_norm"] = float(h[k])
        rec["v_norm"] = float(v[k])
        recs.append(rec)
    return recs


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_outputs(records, fmt: str, path, fields: list[str] | None = None) -> Path:
    """Write ``records`` (a list of dicts) as ``jsonl`` lines or a ``csv`` table.

    Field order follows ``fields`` (CSV) or the record's own key order.  An
    empty CSV table still gets its header line, so ``fields`` is required
    then.  Floats are written with ``repr`` and read back exactly.
    """
    path = Path(path)
    records = list(records)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "jsonl":
            with path.open("w") as fh:
                for r in records:
                    fh.write(json.dumps(_clean(r)) + "\n")
        elif fmt == "csv":
            if fields is None:
                if not records:
                    raise ValueError("an empty table needs explicit field names")
                fields = list(records[0])
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(fields)
                for r in records:
                    w.writerow([_fmt(r[f]) for f in fields])
        elif fmt == "json":
            if len(records) != 1:
                raise ValueError("json output takes exactly one record")
            path.write_text(json.dumps(_clean(records[0]), indent=2) + "\n")
        else:
            raise ValueError(f"unknown output format {fmt!r}")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path


def read_trajectory(path, replicate: int | None = None) -> Trajectory:
    """Load a trajectory written by :func:`write_outputs` (``jsonl``).

    Coefficients come back complex when any imaginary part is nonzero.
    """
    times, rows = [], []
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            if replicate is not None and rec.get("replicate") != replicate:
                continue
            times.append(rec["t"])
            rows.append(rec["coeffs"])
    arr = np.array(rows, dtype=float)
    states = arr[..., 0] + 1j * arr[..., 1] if np.any(arr[..., 1] != 0) else arr[..., 0]
    return Trajectory(np.array(times), states)


# -- tasks ---------------------------------------------------------------
@dataclass
class TaskOutcome:
    status: str
    summary: dict
    files: list
    exit_code: int = EXIT_OK


def _task_check_conditions(cfg: ExperimentConfig, out: Path) -> TaskOutcome:
    m = cfg.build_model()
    cov, s = cfg.build_noise(m)
    n = cfg.params["n_samples"]
    g = m.gelfand()
    anti = verify_antisymmetry(m, n, cfg.seed)
    interp = check_interpolation(g, max(n, 1000), cfg.seed)
    bound_c = estimate_bound_constant(m, n, cfg.seed)
    sig = check_sigma_conditions(s, cov, g, n, cfg.seed, T=cfg.T, complex_state=m.complex_state)
    rows = [
        dict(check="antisymmetry_rel", value=anti.max_rel_residual, bound=1e-10, passed=anti.passed),
        dict(check="energy_rel", value=anti.max_energy_residual, bound=1e-10, passed=anti.max_energy_residual <= 1e-10),
        dict(check="interpolation_ratio", value=interp.max_ratio, bound=interp.a0, passed=interp.passed),
        dict(check="bound_constant_estimate", value=bound_c, bound=float("nan"), passed=True),
        dict(check="sigma_K0", value=sig.K0_hat, bound=sig.declared["K0"], passed=sig.K0_hat <= sig.declared["K0"] * (1 + 1e-9)),
        dict(check="sigma_K1", value=sig.K1_hat, bound=sig.declared["K1"], passed=sig.K1_hat <= sig.declared["K1"] + 1e-9),
        dict(check="sigma_L1", value=sig.L1_hat, bound=sig.declared["L1"], passed=sig.L1_hat <= sig.declared["L1"] * (1 + 1e-9) + 1e-9),
        dict(check="sigma_holder", value=sig.holder_residual, bound=sig.declared["C_holder"], passed=sig.holder_residual <= sig.declared["C_holder"] * (1 + 1e-9) + 1e-9),
    ]
    passed = anti.passed and interp.passed and sig.passed
    f = write_outputs(rows, "csv", out / "checks.csv", ["check", "value", "bound", "passed"])
    summary = dict(
        passed=passed,
        antisymmetry=dict(max_abs=anti.max_abs_residual, max_rel=anti.max_rel_residual, energy=anti.max_energy_residual),
        interpolation=dict(max_ratio=interp.max_ratio, a0=interp.a0),
        bound_constant=bound_c,
        sigma=dict(K0_hat=sig.K0_hat, K1_hat=sig.K1_hat, L1_hat=sig.L1_hat, holder=sig.holder_residual, declared=sig.declared),
    )
    return TaskOutcome("PASS" if passed else "FAIL", summary, [f], EXIT_OK if passed else EXIT_FAIL)


def _task_simulate(cfg: ExperimentConfig, out: Path) -> TaskOutcome:
    m = cfg.build_model()
    cov, s = cfg.build_noise(m)
    icfg = cfg.build_integrator()
    xi = cfg.build_initial(m)
    n_reps = cfg.params["n_reps"]
    ens = simulate_ensemble(
        m, s, cov, icfg, xi, cfg.T, n_reps, 0 if cfg.seed is None else cfg.seed,
        record_noise=cfg.params["record_noise"], on_blowup="raise",
    )
    g = m.gelfand()
    recs = []
    for i in range(len(ens)):
        recs.extend(trajectory_records(ens.trajectory(i), g, replicate=i))
    files = [write_outputs(recs, "jsonl", out / "trajectory.jsonl")]
    if ens.noise is not None:
        noise_recs = [dict(replicate=i, step=k, dW=ens.noise[i, k]) for i in range(len(ens)) for k in range(ens.noise.shape[1])]
        files.append(write_outputs(noise_recs, "jsonl", out / "noise.jsonl"))
    st = apriori_moments(ens, g)
    rows = [dict(quantity=k, mean=st.mean[k], std_error=st.std_error[k]) for k in ("sup_h4", "int_v2", "int_interp4", "total")]
    files.append(write_outputs(rows, "csv", out / "moments.csv", ["quantity", "mean", "std_error"]))
    summary = dict(n_reps=n_reps, final_h_norm=[float(np.linalg.norm(u)) for u in ens.final], moments=st.mean)
    return TaskOutcome("OK", summary, files)


def _task_skeleton(cfg: ExperimentConfig, out: Path) -> TaskOutcome:
    m = cfg.build_model()
    cov, s = cfg.build_noise(m)
    icfg = cfg.build_integrator(eps=0.0)
    h = cfg.build_control(cov)
    try:
        traj = solve_skeleton(m, s, cov, icfg, cfg.build_initial(m), cfg.T, h)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None
    g = m.gelfand()
    f = write_outputs(trajectory_records(traj, g), "jsonl", out / "trajectory.jsonl")
    from .core import x_norm

    summary = dict(x_norm=x_norm(traj, g), final_h_norm=float(np.linalg.norm(traj.final)))
    if h is not None:
        summary["control_energy"] = float(np.sum(h.values**2 / cov.q * np.diff(h.grid)[:, None]))
    return TaskOutcome("OK", summary, [f])


def _minimizer_files(res, p, out: Path) -> list:
    h = res.h_star
    files = []
    path = out / "h_star.txt"
    try:
        h.save(path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None
    files.append(path)
    fields = ["mu", "objective", "action", "violation", "feasible_action", "iterations"]
    files.append(write_outputs(res.stages, "csv", out / "continuation.csv", fields))
    return files


def _minimizer_summary(res) -> dict:
    return dict(
        I_star=res.action_value,
        h_star=dict(grid=res.h_star.grid, values=res.h_star.values),
        converged=res.converged,
        constraint_violation=res.constraint_violation,
        iterations=res.iterations,
        objective=res.objective,
        optimizer_message=res.message,
        terminal_state=res.terminal_state,
    )


def _task_action_min(cfg: ExperimentConfig, out: Path) -> TaskOutcome:
    p = cfg.build_problem()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize_action(p)
    files = _minimizer_files(res, p, out)
    summary = _minimizer_summary(res)
    if not res.converged:
        return TaskOutcome("NONCONVERGED", summary, files, EXIT_NONCONV)
    return TaskOutcome("OK", summary, files)


def _task_mc_ldp(cfg: ExperimentConfig, out: Path) -> TaskOutcome:
    p = cfg.build_problem()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize_action(p)
    files = _minimizer_files(res, p, out)
    summary = _minimizer_summary(res)
    if not res.converged:
        return TaskOutcome("NONCONVERGED", summary, files, EXIT_NONCONV)
    tilt = "auto" if cfg.params["tilt"] == "auto" else None
    scan = rate_scan(p, cfg.params["eps_list"], cfg.params["n_samples"], cfg.seed, minimizer=res, tilt=tilt)
    fields = ["eps", "p_hat", "std_err", "n_hits", "effective_hits", "neg_eps_log_p", "I_star", "censored"]
    rows = [dict(zip(fields, r)) for r in scan.table()]
    files.append(write_outputs(rows, "csv", out / "rate_scan.csv", fields))
    summary["extrapolated_rate"] = scan.extrapolated_rate
    summary["tilt"] = cfg.params["tilt"]
    return TaskOutcome("OK", summary, files)


def _task_increment_stat(cfg: ExperimentConfig, out: Path) -> TaskOutcome:
    m = cfg.build_model()
    cov, s = cfg.build_noise(m)
    icfg = cfg.build_integrator(save_stride=1)
    if icfg.eps <= 0:
        raise ConfigError("integrator.eps must be positive for increment-stat")
    ens = simulate_ensemble(m, s, cov, icfg, cfg.build_initial(m), cfg.T, cfg.params["n_reps"], cfg.seed, on_blowup="raise")
    g = m.gelfand()
    N = cfg.params["N"]
    if N is None:
        N = float(np.quantile(localization_levels(ens, g), cfg.params["quantile"]))
    rows = []
    for n in cfg.params["levels"]:
        rows.append(dict(n=int(n), I_n=time_increment_statistic(ens, int(n), N, g, cfg.params["c"])))
    f = write_outputs(rows, "csv", out / "increment_stat.csv", ["n", "I_n"])
    vals = [r["I_n"] for r in rows]
    slope = fit_loglog_slope([2.0 ** r["n"] for r in rows], vals)
    decreasing = all(b < a for a, b in zip(vals, vals[1:]))
    return TaskOutcome("OK", dict(N=N, log2_slope=slope, strictly_decreasing=decreasing), [f])


def _task_weak_scan(cfg: ExperimentConfig, out: Path) -> TaskOutcome:
    m = cfg.build_model()
    cov, s = cfg.build_noise(m)
    icfg = cfg.build_integrator()
    h = cfg.build_control(cov)
    scan = weak_convergence_scan(
        m, s, cov, cfg.build_initial(m), cfg.T, h, cfg.params["eps_list"], cfg.params["n_reps"], cfg.seed, icfg
    )
    fields = ["eps", "mean_x_distance", "std_error"]
    f = write_outputs([dict(zip(fields, r)) for r in scan.table()], "csv", out / "weak_scan.csv", fields)
    return TaskOutcome("OK", dict(fitted_order=scan.fitted_order), [f])


TASK_RUNNERS = {
    "check-conditions": _task_check_conditions,
    "simulate": _task_simulate,
    "skeleton": _task_skeleton,
    "action-min": _task_action_min,
    "mc-ldp": _task_mc_ldp,
    "increment-stat": _task_increment_stat,
    "weak-scan": _task_weak_scan,
}


def versions() -> dict:
    return dict(hydroldp=__version__, numpy=np.__version__, scipy=scipy.__version__, python=platform.python_version())


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> int:
    """Run the configured task, write its outputs and return the exit code.

    Configuration errors found while building objects return 2, blow-ups 3,
    non-convergence 4; the manifest records the category and message.
    """
    out = Path(cfg.out if out is None else out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out}: {exc.strerror or exc}") from None
    try:
        outcome = TASK_RUNNERS[cfg.task](cfg, out)
    except ConfigError as exc:
        outcome = TaskOutcome("CONFIG_ERROR", dict(error=str(exc)), [], EXIT_CONFIG)
    except BlowUpError as exc:
        outcome = TaskOutcome(
            "BLOWUP", dict(error=str(exc), t=exc.t, norm=exc.norm, step=exc.step, replicate=exc.replicate), [], EXIT_BLOWUP
        )
    manifest = dict(
        task=cfg.task,
        seed=cfg.seed,
        status=outcome.status,
        exit_code=outcome.exit_code,
        config=cfg.as_dict(),
        defaults_applied=cfg.defaults_applied,
        versions=versions(),
        outputs=sorted(Path(f).name for f in outcome.files),
        result=outcome.summary,
    )
    write_outputs([manifest], "json", out / "manifest.json")
    write_outputs([dict(wall_time_s=time.perf_counter() - t0)], "json", out / "timing.json")
    return outcome.exit_code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="hydroldp", description="Stochastic hydrodynamical systems: simulation and large deviations.")
    ap.add_argument("task", choices=sorted(TASK_RUNNERS))
    ap.add_argument("config", help="TOML configuration file")
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    ap.add_argument("--out", default=None, help="output directory (overrides the configured one)")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config, task=args.task)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg.seed = args.seed
        check_seed(cfg)
    except ConfigError as exc:
        print(f"hydroldp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code = run_experiment(cfg, args.out)
    except OutputError as exc:
        print(f"hydroldp: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out or cfg.out)
    status = json.loads((out / "manifest.json").read_text())["status"]
    stream = sys.stdout if code == EXIT_OK else sys.stderr
    print(f"hydroldp {args.task}: {status} (outputs in {out})", file=stream)
    return code


if __name__ == "__main__":
    sys.exit(main())
