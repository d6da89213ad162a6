"""Lock-step simulation of the networked system and its estimators.

All estimators run against one shared noise realization, and every reported
estimate follows the prediction convention: the value stored at time t is the
estimate of x_t held before y_t is processed. Within a step, every node reads
only its neighbors' estimates from the previous round plus its own
measurement (one broadcast per sampling interval).
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines
from .blue import SelectorSet, build_selectors, correct, fuse_neighbors, predict
from .errors import (
    DimensionMismatch,
    InvalidArgument,
    ObserverError,
    SimulationAborted,
    UnknownEstimator,
)
from .linalg import require_spd
from .model import NetworkModel, neighbors
from .rng import substream
from .synthesis import (
    GainSet,
    GlobalCovariance,
    SynthesisConfig,
    covariance_step,
    initial_global_covariance,
)

ESTIMATORS = ("centralized", "consensus", "tv_blue", "fixed_gain")


@dataclass(frozen=True)
class SimulationScenario:
    """One reproducible simulation setup over a fixed model."""

    model: NetworkModel
    horizon: int
    seed: int
    x0_prior_mean: np.ndarray | None = None  # zeros when omitted
    P0: np.ndarray | float | None = None     # identity when omitted
    initial_estimate_policy: str = "prior_mean"  # or "shared_draw"

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidArgument(f"horizon must be >= 1, got {self.horizon}")
        if self.initial_estimate_policy not in ("prior_mean", "shared_draw"):
            raise InvalidArgument(
                f"unknown initial_estimate_policy {self.initial_estimate_policy!r}"
            )

    def prior_mean(self) -> np.ndarray:
        if self.x0_prior_mean is None:
            return np.zeros(self.model.n)
        mean = np.asarray(self.x0_prior_mean, dtype=float).reshape(-1)
        if mean.shape != (self.model.n,):
            raise DimensionMismatch(
                f"x0_prior_mean must have dimension {self.model.n}, got {mean.shape}"
            )
        return mean

    def prior_cov(self) -> np.ndarray:
        if self.P0 is None:
            return np.eye(self.model.n)
        if np.ndim(self.P0) == 0:
            return float(self.P0) * np.eye(self.model.n)
        return require_spd(self.P0, "P0")


@dataclass
class SimulationTrace:
    """Truth and per-node predicted estimates of every estimator that ran."""

    truth: np.ndarray                     # (T, n)
    estimates: dict[str, np.ndarray]      # name -> (T, N, n)
    notes: dict[str, list[str]] = field(default_factory=dict)

    def errors(self, estimator: str) -> np.ndarray:
        if estimator not in self.estimates:
            raise UnknownEstimator(estimator)
        return self.estimates[estimator] - self.truth[:, None, :]


def avg_error_norm(trace: SimulationTrace, estimator: str) -> np.ndarray:
    """Per-step mean over nodes of the Euclidean estimate-error norm."""
    err = trace.errors(estimator)
    return np.linalg.norm(err, axis=2).mean(axis=1)


def simulate_truth(scenario: SimulationScenario):
    """Draw the truth sequence and every node's measurements.

    Named substreams keep the realization fixed: the truth state uses one
    stream, each node's measurement noise another, so adding or removing
    estimators can never perturb the data they all consume. Returns
    ``(truth, measurements)`` with truth of shape (T, n) and measurements a
    list of per-node (T, m_i) arrays.
    """
    model = scenario.model
    T, n = scenario.horizon, model.n
    mean = scenario.prior_mean()
    L0 = np.linalg.cholesky(scenario.prior_cov())
    Lq = np.linalg.cholesky(model.Q)
    gen = substream(scenario.seed, "truth")
    truth = np.empty((T, n))
    truth[0] = mean + L0 @ gen.standard_normal(n)
    if T > 1:
        w = gen.standard_normal((T - 1, n)) @ Lq.T
        for t in range(1, T):
            truth[t] = model.A @ truth[t - 1] + w[t - 1]
    measurements = []
    for i, node in enumerate(model.nodes, start=1):
        if node.m:
            gi = substream(scenario.seed, "meas", i)
            noise = gi.standard_normal((T, node.m)) @ np.linalg.cholesky(node.R).T
            measurements.append(truth @ node.C.T + noise)
        else:
            measurements.append(np.zeros((T, 0)))
    return truth, measurements


def initial_estimates(scenario: SimulationScenario) -> np.ndarray:
    """Initial per-node estimates (N, n) under the configured policy."""
    model = scenario.model
    mean = scenario.prior_mean()
    if scenario.initial_estimate_policy == "shared_draw":
        gen = substream(scenario.seed, "init")
        draw = mean + np.linalg.cholesky(scenario.prior_cov()) @ gen.standard_normal(model.n)
        return np.tile(draw, (model.N, 1))
    return np.tile(mean, (model.N, 1))


def fixed_gain_step(gains: GainSet, i: int, neighbor_estimates, y_i) -> np.ndarray:
    """One fixed-gain update of node i from its neighbors' estimates and its measurement.

    ``neighbor_estimates`` must be ordered like the node's neighbor list. No
    covariance data is consumed; this is the entire online computation.
    """
    node = gains.for_node(i)
    if len(neighbor_estimates) != len(node.neighbors):
        raise DimensionMismatch(
            f"node {i} expects {len(node.neighbors)} neighbor estimates"
        )
    out = np.zeros(gains.n)
    for j, xj in zip(node.neighbors, neighbor_estimates):
        out += node.D[j] @ np.asarray(xj, dtype=float)
    if node.F.shape[1]:
        out += node.F @ np.asarray(y_i, dtype=float)
    return out


def time_varying_step(
    i: int,
    Pbar: GlobalCovariance,
    estimates: np.ndarray,
    y_i,
    model: NetworkModel,
    selectors: SelectorSet,
) -> np.ndarray:
    """Advance node i one step with covariance-dependent gains.

    Composes neighborhood fusion, measurement correction, and prediction.
    ``estimates`` holds all nodes' current estimates as an (N, n) array, but
    only the rows of node i's neighborhood are read.
    """
    sel = selectors.for_node(i)
    xbars = [estimates[j - 1] for j in sel.neighbors]
    x_fused, fused_info = fuse_neighbors(i, selectors, Pbar, xbars)
    x_corr, _ = correct(x_fused, fused_info, model.nodes[i - 1], y_i)
    return predict(x_corr, model.A)


class _FixedGainDriver:
    def __init__(self, scenario, gains: GainSet):
        model = scenario.model
        if gains.n != model.n or gains.N != model.N:
            raise DimensionMismatch(
                f"gain set is for n={gains.n}, N={gains.N}; model has n={model.n}, N={model.N}"
            )
        for node in gains.nodes:
            expected = tuple(neighbors(model, node.i))
            if node.neighbors != expected:
                raise DimensionMismatch(
                    f"gain set neighbors {node.neighbors} for node {node.i} "
                    f"do not match the model graph {expected}"
                )
        self.gains = gains
        self.est = initial_estimates(scenario)

    def estimates(self) -> np.ndarray:
        return self.est

    def step(self, ys) -> None:
        self.est = fixed_gain_sweep(self.gains, self.est, ys)


def fixed_gain_sweep(gains: GainSet, estimates: np.ndarray, ys) -> np.ndarray:
    """Synchronous round of fixed-gain updates; node i reads only its neighborhood."""
    out = np.empty_like(estimates)
    for node in gains.nodes:
        nbr = [estimates[j - 1] for j in node.neighbors]
        out[node.i - 1] = fixed_gain_step(gains, node.i, nbr, ys[node.i - 1])
    return out


class _TimeVaryingDriver:
    def __init__(self, scenario, selectors: SelectorSet, pbar0: GlobalCovariance | None):
        model = scenario.model
        self.model = model
        self.selectors = selectors
        if pbar0 is None:
            pbar0 = initial_global_covariance(
                model, SynthesisConfig(P0=scenario.prior_cov(), P0_mode="common_prior")
            )
        self.pbar = pbar0
        self.est = initial_estimates(scenario)

    def estimates(self) -> np.ndarray:
        return self.est

    def step(self, ys) -> None:
        current = self.est
        out = np.empty_like(current)
        for i in range(1, self.model.N + 1):
            out[i - 1] = time_varying_step(
                i, self.pbar, current, ys[i - 1], self.model, self.selectors
            )
        self.est = out
        self.pbar = covariance_step(self.pbar, self.model, self.selectors)


class _CentralizedDriver:
    def __init__(self, scenario):
        self.model = scenario.model
        self.state = baselines.CentralizedKfState(
            xbar=scenario.prior_mean(), Pbar=scenario.prior_cov()
        )
        if scenario.initial_estimate_policy == "shared_draw":
            self.state.xbar = initial_estimates(scenario)[0]

    def estimates(self) -> np.ndarray:
        return np.tile(self.state.xbar, (self.model.N, 1))

    def step(self, ys) -> None:
        self.state = baselines.centralized_step(
            self.state, baselines.stack_measurements(ys), self.model
        )


class _ConsensusDriver:
    def __init__(self, scenario, rounds: int, reweight: bool):
        self.model = scenario.model
        self.rounds = rounds
        self.reweight = reweight
        self.states = baselines.consensus_init(
            self.model, initial_estimates(scenario)[0], scenario.prior_cov()
        )
        self.fallback_steps: list[int] = []
        self._t = 0

    def estimates(self) -> np.ndarray:
        return baselines.consensus_estimates(self.states)

    def step(self, ys) -> None:
        self.states, flags = baselines.consensus_dkf_step(
            self.states, ys, self.model, self.rounds, reweight=self.reweight
        )
        if any(flags):
            self.fallback_steps.append(self._t)
        self._t += 1


def run(
    scenario: SimulationScenario,
    estimators,
    *,
    gains: GainSet | None = None,
    pbar0: GlobalCovariance | None = None,
    consensus_rounds: int = 1,
    consensus_reweight: bool = True,
) -> SimulationTrace:
    """Simulate all requested estimators in lock-step over one shared realization.

    ``fixed_gain`` requires a gain set; ``tv_blue`` starts from the
    common-prior global covariance unless ``pbar0`` overrides it. On an
    estimator failure mid-run the raised SimulationAborted carries the trace
    simulated so far.
    """
    names = list(estimators)
    for name in names:
        if name not in ESTIMATORS:
            raise UnknownEstimator(name)
    if len(set(names)) != len(names):
        raise InvalidArgument("estimator list contains duplicates")
    if "fixed_gain" in names and gains is None:
        raise InvalidArgument("fixed_gain estimator requires a gain set")
    model = scenario.model
    truth, measurements = simulate_truth(scenario)
    selectors = build_selectors(model) if "tv_blue" in names else None
    drivers = {}
    for name in names:
        if name == "fixed_gain":
            drivers[name] = _FixedGainDriver(scenario, gains)
        elif name == "tv_blue":
            drivers[name] = _TimeVaryingDriver(scenario, selectors, pbar0)
        elif name == "centralized":
            drivers[name] = _CentralizedDriver(scenario)
        else:
            drivers[name] = _ConsensusDriver(scenario, consensus_rounds, consensus_reweight)
    T, N, n = scenario.horizon, model.N, model.n
    series = {name: np.empty((T, N, n)) for name in names}
    for t in range(T):
        for name in names:
            series[name][t] = drivers[name].estimates()
        if t == T - 1:
            break
        ys = [measurements[i][t] for i in range(N)]
        for name in names:
            try:
                drivers[name].step(ys)
            except ObserverError as exc:
                partial = SimulationTrace(
                    truth=truth[: t + 1].copy(),
                    estimates={k: series[k][: t + 1].copy() for k in names},
                )
                raise SimulationAborted(
                    f"estimator '{name}' failed at step {t}: {exc}",
                    step=t,
                    estimator=name,
                    partial_trace=partial,
                ) from exc
    notes = {}
    for name, driver in drivers.items():
        if isinstance(driver, _ConsensusDriver) and driver.fallback_steps:
            notes[name] = [f"prediction-only fallback at steps {driver.fallback_steps}"]
    return SimulationTrace(truth=truth, estimates=series, notes=notes)


def monte_carlo_errors(
    scenario: SimulationScenario, gains: GainSet, runs: int, t_star: int | None = None
) -> np.ndarray:
    """Fixed-gain estimate errors at time t_star across many realizations.

    Run r uses seed ``scenario.seed + r`` with the same substream layout as
    ``run``, so any column can be cross-checked against a single simulation.
    The observer arithmetic is applied through the (block-sparse) global gain
    matrices, vectorized over runs. Returns errors of shape (runs, N, n).
    """
    model = scenario.model
    T = scenario.horizon
    t_star = T - 1 if t_star is None else t_star
    if not (0 <= t_star < T):
        raise InvalidArgument(f"t_star must be in [0, {T - 1}], got {t_star}")
    N, n = model.N, model.n
    from .synthesis import closed_loop_matrix

    D_global = closed_loop_matrix(gains)
    m_total = sum(node.m for node in model.nodes)
    F_global = np.zeros((N * n, m_total))
    col = 0
    for node_gains, node in zip(gains.nodes, model.nodes):
        F_global[(node_gains.i - 1) * n : node_gains.i * n, col : col + node.m] = node_gains.F
        col += node.m
    # stack per-run noise drawn from the same substreams run() would use
    X0 = np.empty((runs, n))
    W = np.empty((runs, max(T - 1, 1), n)) if T > 1 else None
    V = np.empty((runs, T, m_total))
    mean = scenario.prior_mean()
    L0 = np.linalg.cholesky(scenario.prior_cov())
    Lq = np.linalg.cholesky(model.Q)
    chols = [np.linalg.cholesky(node.R) if node.m else None for node in model.nodes]
    for r in range(runs):
        seed = scenario.seed + r
        gen = substream(seed, "truth")
        X0[r] = mean + L0 @ gen.standard_normal(n)
        if T > 1:
            W[r] = gen.standard_normal((T - 1, n)) @ Lq.T
        col = 0
        for i, node in enumerate(model.nodes, start=1):
            if node.m:
                gi = substream(seed, "meas", i)
                V[r, :, col : col + node.m] = gi.standard_normal((T, node.m)) @ chols[i - 1].T
                col += node.m
    C_all, _ = baselines.stacked_sensing(model)
    X = X0.T.copy()                                # (n, runs)
    if scenario.initial_estimate_policy == "shared_draw":
        init = np.empty((runs, n))
        for r in range(runs):
            init[r] = initial_estimates(replace(scenario, seed=scenario.seed + r))[0]
    else:
        init = np.tile(mean, (runs, 1))
    est = np.tile(init.T, (N, 1))                  # (N n, runs), all nodes share the init
    for t in range(t_star):
        Y = C_all @ X + V[:, t, :].T
        est = D_global @ est + F_global @ Y
        X = model.A @ X + W[:, t, :].T
    errors = est.T.reshape(runs, N, n) - X.T[:, None, :]
    return errors


# ---------------------------------------------------------------------------
# Trace export
# ---------------------------------------------------------------------------


def _write_text_atomic(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace_csv(trace: SimulationTrace, path, truncated_at: int | None = None) -> None:
    """Combined long-format CSV of the average error norm per estimator and step."""
    lines = ["t,estimator,avg_error_norm"]
    for name in trace.estimates:
        series = avg_error_norm(trace, name)
        lines.extend(f"{t},{name},{float(v)!r}" for t, v in enumerate(series))
    if truncated_at is not None:
        lines.append(f"# truncated at t={truncated_at}")
    _write_text_atomic(path, "\n".join(lines) + "\n")


def write_per_node_csv(trace: SimulationTrace, path) -> None:
    lines = ["t,node,estimator,err_norm"]
    for name in trace.estimates:
        norms = np.linalg.norm(trace.errors(name), axis=2)
        for t in range(norms.shape[0]):
            lines.extend(
                f"{t},{i + 1},{name},{float(norms[t, i])!r}" for i in range(norms.shape[1])
            )
    _write_text_atomic(path, "\n".join(lines) + "\n")


def write_dat_files(trace: SimulationTrace, out_dir) -> dict[str, str]:
    """One whitespace-free .dat file per estimator: one average error norm per line."""
    paths = {}
    for name in trace.estimates:
        series = avg_error_norm(trace, name)
        path = os.path.join(os.fspath(out_dir), f"{name}.dat")
        _write_text_atomic(path, "\n".join(f"{float(v)!r}" for v in series) + "\n")
        paths[name] = path
    return paths
