"""Command-line harness: offline gain synthesis, simulation, Monte Carlo studies.

Exit codes: 0 success, 2 parse/validation failure, 3 non-convergence,
4 singular information, 5 estimator failure mid-run. Failures print one
machine-readable JSON object to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import observer
from .errors import (
    DimensionMismatch,
    Diverged,
    InvalidArgument,
    MaxIterationsExceeded,
    NotPositiveDefinite,
    SimulationAborted,
    SingularInformation,
    UnknownEstimator,
)
from .model import NetworkModel, SensorSpec, load_scenario, validate, write_json_atomic
from .observer import SimulationScenario, avg_error_norm
from .rng import substream
from .synthesis import (
    SynthesisConfig,
    closed_loop_spectral_radius,
    iterate_to_fixed_point,
    load_gains,
    save_gains,
    synthesize,
)

_VALIDATION_ERRORS = (
    OSError,
    json.JSONDecodeError,
    DimensionMismatch,
    InvalidArgument,
    NotPositiveDefinite,
    UnknownEstimator,
    KeyError,
    TypeError,
    ValueError,
)


@dataclass
class RunConfig:
    command: str
    scenario_path: str = ""
    gains_path: str = ""
    seed: int = 0
    horizon: int = 80
    epsilon: float = 1e-4
    max_iter: int = 10000
    runs: int = 10
    output_dir: str = "."
    estimators: list[str] = field(default_factory=lambda: list(observer.ESTIMATORS))
    per_node: bool = False


def _fail(code: int, err: BaseException) -> int:
    print(json.dumps({"error": type(err).__name__, "message": str(err)}))
    return code


def _threads() -> int:
    raw = os.environ.get("DOBS_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value <= 0:
        value = min(32, os.cpu_count() or 1)
    return value


def _load_validated(path):
    model, P0 = load_scenario(path)
    report = validate(model)
    if not report.collective_detectability:
        raise InvalidArgument(
            "scenario is not collectively detectable: an unstable or marginally "
            "stable mode is unobserved by the stacked measurements"
        )
    return model, P0, report


def cmd_synth(cfg: RunConfig) -> int:
    try:
        model, P0, report = _load_validated(cfg.scenario_path)
    except _VALIDATION_ERRORS as err:
        return _fail(2, err)
    config = SynthesisConfig(epsilon=cfg.epsilon, max_iterations=cfg.max_iter, P0=P0)
    try:
        gains = synthesize(model, config)
    except (MaxIterationsExceeded, Diverged) as err:
        return _fail(3, err)
    except SingularInformation as err:
        return _fail(4, err)
    os.makedirs(cfg.output_dir, exist_ok=True)
    gains_path = os.path.join(cfg.output_dir, "gains.json")
    save_gains(gains, gains_path)
    rho = closed_loop_spectral_radius(gains)
    node_traces = [
        float(np.trace(gains.pbar.block(i, i))) for i in range(1, model.N + 1)
    ]
    synth_report = {
        "iterations": gains.iterations,
        "final_delta": gains.final_delta,
        "epsilon": cfg.epsilon,
        "spectral_radius": rho,
        "node_state_variance_trace": node_traces,
        "warnings": report.warnings,
    }
    write_json_atomic(os.path.join(cfg.output_dir, "synth_report.json"), synth_report)
    print(
        f"synth: converged in {gains.iterations} iterations "
        f"(delta {gains.final_delta:.3e}), spectral radius {rho:.6f}"
    )
    return 0


def cmd_sim(cfg: RunConfig) -> int:
    try:
        model, P0, _ = _load_validated(cfg.scenario_path)
        gains = None
        if "fixed_gain" in cfg.estimators:
            gains = load_gains(cfg.gains_path)
        for name in cfg.estimators:
            if name not in observer.ESTIMATORS:
                raise UnknownEstimator(name)
        scenario = SimulationScenario(
            model=model, horizon=cfg.horizon, seed=cfg.seed, P0=P0
        )
    except _VALIDATION_ERRORS as err:
        return _fail(2, err)
    os.makedirs(cfg.output_dir, exist_ok=True)
    try:
        trace = observer.run(scenario, cfg.estimators, gains=gains)
    except SimulationAborted as err:
        if err.partial_trace is not None and err.partial_trace.truth.shape[0] > 0:
            observer.write_trace_csv(
                err.partial_trace,
                os.path.join(cfg.output_dir, "trace.csv"),
                truncated_at=err.step,
            )
            observer.write_dat_files(err.partial_trace, cfg.output_dir)
        return _fail(5, err)
    except SingularInformation as err:
        return _fail(4, err)
    observer.write_trace_csv(trace, os.path.join(cfg.output_dir, "trace.csv"))
    if cfg.per_node:
        observer.write_per_node_csv(trace, os.path.join(cfg.output_dir, "per_node.csv"))
    observer.write_dat_files(trace, cfg.output_dir)
    tail = max(1, cfg.horizon // 4)
    summary = {}
    for name in cfg.estimators:
        series = avg_error_norm(trace, name)
        summary[name] = float(series[-tail:].mean())
        print(f"{name}: steady-state avg error norm (last {tail} steps) = {summary[name]:.6g}")
    write_json_atomic(
        os.path.join(cfg.output_dir, "summary.json"),
        {"horizon": cfg.horizon, "seed": cfg.seed, "steady_state_avg_error": summary,
         "notes": trace.notes},
    )
    return 0


def _perturbed_model(model: NetworkModel, seed: int, run_index: int) -> NetworkModel:
    """Scale each measurement matrix entrywise by independent Uniform[0.5, 1.5] draws.

    Zero entries stay zero, so the sparsity structure (and with it collective
    detectability) is preserved; dynamics and noise covariances are untouched.
    """
    gen = substream(seed, "mc", run_index)
    nodes = []
    for node in model.nodes:
        factors = gen.uniform(0.5, 1.5, size=node.C.shape)
        nodes.append(SensorSpec(C=node.C * factors, R=node.R.copy()))
    return NetworkModel(A=model.A, Q=model.Q, nodes=tuple(nodes), edges=model.edges)


def cmd_mc(cfg: RunConfig) -> int:
    try:
        model, P0, _ = _load_validated(cfg.scenario_path)
        if cfg.runs < 1:
            raise InvalidArgument(f"runs must be >= 1, got {cfg.runs}")
    except _VALIDATION_ERRORS as err:
        return _fail(2, err)
    config = SynthesisConfig(epsilon=cfg.epsilon, max_iterations=cfg.max_iter, P0=P0)

    def one_run(r: int) -> dict:
        perturbed = _perturbed_model(model, cfg.seed, r)
        try:
            result = iterate_to_fixed_point(perturbed, config)
            return {
                "run": r,
                "converged": True,
                "iterations": result.iterations,
                "final_delta": result.final_delta,
            }
        except (MaxIterationsExceeded, Diverged, SingularInformation) as err:
            row = {"run": r, "converged": False, "iterations": None, "final_delta": None,
                   "error": f"{type(err).__name__}: {err}"}
            if isinstance(err, MaxIterationsExceeded):
                row["final_delta"] = err.final_delta
            return row

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(one_run, range(cfg.runs)))
    rows.sort(key=lambda row: row["run"])
    iteration_counts = [row["iterations"] for row in rows if row["converged"]]
    aggregate = {"converged_runs": len(iteration_counts), "total_runs": cfg.runs}
    if iteration_counts:
        aggregate.update(
            min=min(iteration_counts),
            max=max(iteration_counts),
            mean=statistics.mean(iteration_counts),
            median=statistics.median(iteration_counts),
        )
    report = {"epsilon": cfg.epsilon, "seed": cfg.seed, "runs": rows, "aggregate": aggregate}
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_json_atomic(os.path.join(cfg.output_dir, "mc_report.json"), report)
    csv_lines = ["run,converged,iterations,final_delta"]
    for row in rows:
        iters = "" if row["iterations"] is None else row["iterations"]
        delta = "" if row["final_delta"] is None else repr(float(row["final_delta"]))
        csv_lines.append(f"{row['run']},{row['converged']},{iters},{delta}")
    from .observer import _write_text_atomic

    _write_text_atomic(
        os.path.join(cfg.output_dir, "mc_report.csv"), "\n".join(csv_lines) + "\n"
    )
    print(
        f"mc: {aggregate['converged_runs']}/{cfg.runs} runs converged"
        + (
            f", iterations min/median/mean/max = "
            f"{aggregate['min']}/{aggregate['median']}/{aggregate['mean']:.1f}/{aggregate['max']}"
            if iteration_counts
            else ""
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dobs",
        description="Synthesize and simulate fixed-gain distributed observers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="compute fixed observer gains offline")
    synth.add_argument("--scenario", required=True)
    synth.add_argument("--epsilon", type=float, default=1e-4)
    synth.add_argument("--max-iter", type=int, default=10000)
    synth.add_argument("--out", default=".")

    sim = sub.add_parser("sim", help="simulate estimators on one realization")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--gains", default="")
    sim.add_argument("--horizon", type=int, default=80)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument(
        "--estimators",
        default=",".join(observer.ESTIMATORS),
        help="comma-separated subset of " + ",".join(observer.ESTIMATORS),
    )
    sim.add_argument("--per-node", action="store_true", help="also write per-node error CSV")
    sim.add_argument("--out", default=".")

    mc = sub.add_parser("mc", help="Monte Carlo convergence study with perturbed sensing")
    mc.add_argument("--scenario", required=True)
    mc.add_argument("--runs", type=int, default=10)
    mc.add_argument("--epsilon", type=float, default=1e-4)
    mc.add_argument("--max-iter", type=int, default=10000)
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--out", default=".")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command, scenario_path=args.scenario)
    cfg.output_dir = args.out
    if args.command == "synth":
        cfg.epsilon = args.epsilon
        cfg.max_iter = args.max_iter
    elif args.command == "sim":
        cfg.gains_path = args.gains
        cfg.horizon = args.horizon
        cfg.seed = args.seed
        cfg.estimators = [name for name in args.estimators.split(",") if name]
        cfg.per_node = args.per_node
    else:
        cfg.runs = args.runs
        cfg.epsilon = args.epsilon
        cfg.max_iter = args.max_iter
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cfg = config_from_args(args)
    if cfg.command == "synth":
        return cmd_synth(cfg)
    if cfg.command == "sim":
        return cmd_sim(cfg)
    return cmd_mc(cfg)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
