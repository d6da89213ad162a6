"""Global covariance recursion to steady state and fixed observer gains.

The global error covariance of the distributed BLUE observer is an N x N grid
of n x n cross-node blocks. One iterate maps it through

    P' = T P T' + diag_i(K_i R_i K_i') + (1 1') (x) Q,

where row block i of T carries the node's neighborhood fusion weights mapped
through its corrected information matrix and the dynamics, and K_i injects
the node's measurement noise. Iterating to a fixed point and freezing the
per-node blocks of T (gains D) together with K (gains F) yields a distributed
observer with constant gains whose steady-state error covariance equals the
fixed point. The unbiasedness identity sum_j D_ij + F_i C_i = A holds at
every iterate, not just at convergence, and is asserted in the test suite.
"""

from __future__ import annotations

import json
import warnings as _warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .blue import NodeInformation, SelectorSet, build_selectors, fusion_weights, sensing_products
from .errors import Diverged, DimensionMismatch, MaxIterationsExceeded, SingularInformation
from .linalg import PINV_RTOL, require_spd, spectral_radius, symmetrize
from .model import NetworkModel, write_json_atomic


@dataclass(frozen=True)
class GlobalCovariance:
    """Stacked cross-node error covariance, an N x N grid of n x n blocks."""

    P: np.ndarray
    n: int
    N: int

    def block(self, i: int, j: int) -> np.ndarray:
        n = self.n
        return self.P[(i - 1) * n : i * n, (j - 1) * n : j * n]


@dataclass(frozen=True)
class TransitionOperator:
    """One-step error transition: T couples neighbor estimates, K injects measurement noise.

    T's block (i, j) is zero whenever j is not in node i's neighborhood.
    """

    T: np.ndarray
    K_blocks: tuple[np.ndarray, ...]


@dataclass
class SynthesisConfig:
    """Knobs for the fixed-point iteration.

    ``P0`` may be a full matrix, a scalar (scaled identity), or None for the
    identity. ``common_prior`` initializes every cross-block to P0, modelling
    all nodes starting from one shared prior estimate; ``block_diagonal``
    initializes independent priors. ``regularize`` adds a ridge to a singular
    node information matrix instead of failing; it is off by default because
    a singular information matrix usually indicates a modelling defect.
    """

    epsilon: float = 1e-4
    max_iterations: int = 10000
    divergence_threshold: float | None = None
    P0_mode: str = "common_prior"
    P0: np.ndarray | float | None = None
    pinv_rtol: float = PINV_RTOL
    regularize: bool = False
    ridge: float = 1e-9

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.P0_mode not in ("common_prior", "block_diagonal"):
            raise ValueError(f"unknown P0_mode {self.P0_mode!r}")


def resolve_p0(model: NetworkModel, P0) -> np.ndarray:
    if P0 is None:
        return np.eye(model.n)
    if np.ndim(P0) == 0:
        return float(P0) * np.eye(model.n)
    return require_spd(P0, "P0")


def initial_global_covariance(
    model: NetworkModel, config: SynthesisConfig
) -> GlobalCovariance:
    """Initial global covariance per the configured prior structure."""
    P0 = resolve_p0(model, config.P0)
    require_spd(P0, "P0")
    N = model.N
    if config.P0_mode == "common_prior":
        P = np.tile(P0, (N, N))
    else:
        P = np.kron(np.eye(N), P0)
    return GlobalCovariance(P=symmetrize(P), n=model.n, N=N)


def _node_sensing(model: NetworkModel):
    return [sensing_products(node) for node in model.nodes]


def build_transition(
    Pbar: GlobalCovariance,
    model: NetworkModel,
    selectors: SelectorSet | None = None,
    *,
    rtol: float = PINV_RTOL,
    regularize: bool = False,
    ridge: float = 1e-9,
) -> tuple[TransitionOperator, list[NodeInformation]]:
    """Per-node gains at the given covariance, assembled into the global operator.

    Block (i, j) of T is A Omega_i^-1 W_ij for j in the neighborhood (W being
    the fusion weights), and K_i = A Omega_i^-1 C_i' R_i^-1. Raises
    SingularInformation naming the node whose combined neighborhood-plus-
    measurement information cannot be inverted.
    """
    selectors = selectors or build_selectors(model)
    n, N = model.n, model.N
    A = model.A
    if Pbar.P.shape != (N * n, N * n):
        raise DimensionMismatch(
            f"global covariance must be {N * n}x{N * n}, got {Pbar.P.shape}"
        )
    T = np.zeros((N * n, N * n))
    K_blocks: list[np.ndarray] = []
    infos: list[NodeInformation] = []
    sensing = _node_sensing(model)
    eye_n = np.eye(n)
    for sel in selectors.per_node:
        i = sel.node
        W, fused = fusion_weights(sel, Pbar.P, rtol=rtol)
        S, CtRinv = sensing[i - 1]
        total = symmetrize(fused + S)
        try:
            factor = cho_factor(total, lower=True)
        except np.linalg.LinAlgError:
            if not regularize:
                raise SingularInformation(
                    f"node {i}: combined information matrix is singular", node=i
                ) from None
            _warnings.warn(
                f"node {i}: information matrix singular, adding ridge {ridge:g}",
                RuntimeWarning,
                stacklevel=2,
            )
            total = symmetrize(total + ridge * eye_n)
            factor = cho_factor(total, lower=True)
        A_total_inv = A @ cho_solve(factor, eye_n)
        row = A_total_inv @ W
        rows = slice((i - 1) * n, i * n)
        for a, j in enumerate(sel.neighbors):
            T[rows, (j - 1) * n : j * n] = row[:, a * n : (a + 1) * n]
        K_blocks.append(A_total_inv @ CtRinv)
        infos.append(NodeInformation(fused=fused, sensing=S, total=total))
    return TransitionOperator(T=T, K_blocks=tuple(K_blocks)), infos


def covariance_step(
    Pbar: GlobalCovariance,
    model: NetworkModel,
    selectors: SelectorSet | None = None,
    *,
    transition: tuple[TransitionOperator, list[NodeInformation]] | None = None,
    rtol: float = PINV_RTOL,
    regularize: bool = False,
    ridge: float = 1e-9,
) -> GlobalCovariance:
    """One iterate of the global covariance recursion.

    Equals the covariance of the stacked error recursion e' = T e + K v - w
    (with w the single shared process noise): the middle term is the
    per-node measurement noise K_i R_i K_i' and the process noise couples
    every pair of blocks through (1 1') (x) Q.
    """
    if transition is None:
        transition = build_transition(
            Pbar, model, selectors, rtol=rtol, regularize=regularize, ridge=ridge
        )
    operator, _ = transition
    n, N = model.n, model.N
    P = operator.T @ Pbar.P @ operator.T.T
    for i, (K_i, node) in enumerate(zip(operator.K_blocks, model.nodes), start=1):
        if node.m:
            rows = slice((i - 1) * n, i * n)
            P[rows, rows] += K_i @ node.R @ K_i.T
    P += np.tile(model.Q, (N, N))
    return GlobalCovariance(P=symmetrize(P), n=n, N=N)


@dataclass(frozen=True)
class FixedPointResult:
    pbar: GlobalCovariance
    iterations: int
    final_delta: float


def iterate_to_fixed_point(
    model: NetworkModel,
    config: SynthesisConfig | None = None,
    selectors: SelectorSet | None = None,
) -> FixedPointResult:
    """Iterate the covariance recursion until successive iterates are epsilon-close.

    Convergence is measured in the Frobenius norm of the full global matrix.
    Raises MaxIterationsExceeded (carrying the last delta) or Diverged when
    the iterate norm passes the divergence threshold.
    """
    config = config or SynthesisConfig()
    selectors = selectors or build_selectors(model)
    P = initial_global_covariance(model, config)
    threshold = config.divergence_threshold
    if threshold is None:
        threshold = 1e12 * float(np.linalg.norm(P.P, "fro"))
    delta = np.inf
    for k in range(1, config.max_iterations + 1):
        P_next = covariance_step(
            P,
            model,
            selectors,
            rtol=config.pinv_rtol,
            regularize=config.regularize,
            ridge=config.ridge,
        )
        delta = float(np.linalg.norm(P_next.P - P.P, "fro"))
        norm = float(np.linalg.norm(P_next.P, "fro"))
        if not np.isfinite(norm) or norm > threshold:
            raise Diverged(
                f"covariance iterate norm {norm:.3e} exceeded threshold {threshold:.3e} "
                f"after {k} iterations",
                iterations=k,
                norm=norm,
            )
        P = P_next
        if delta < config.epsilon:
            return FixedPointResult(pbar=P, iterations=k, final_delta=delta)
    raise MaxIterationsExceeded(
        f"no fixed point within {config.max_iterations} iterations "
        f"(last delta {delta:.3e}, epsilon {config.epsilon:g})",
        iterations=config.max_iterations,
        final_delta=delta,
    )


@dataclass
class NodeGains:
    """Fixed gains of one node: D maps neighbor estimates, F maps the measurement."""

    i: int
    neighbors: tuple[int, ...]
    D: dict[int, np.ndarray]
    F: np.ndarray
    Omega: np.ndarray

    @property
    def stacked_D(self) -> np.ndarray:
        return np.hstack([self.D[j] for j in self.neighbors])


@dataclass
class GainSet:
    n: int
    N: int
    nodes: tuple[NodeGains, ...]
    iterations: int = 0
    final_delta: float = float("nan")
    epsilon: float = float("nan")
    pbar: GlobalCovariance | None = None

    def for_node(self, i: int) -> NodeGains:
        return self.nodes[i - 1]


def compute_gains(
    Pbar: GlobalCovariance,
    model: NetworkModel,
    selectors: SelectorSet | None = None,
    *,
    iterations: int = 0,
    final_delta: float = float("nan"),
    epsilon: float = float("nan"),
    rtol: float = PINV_RTOL,
) -> GainSet:
    """Freeze the observer gains at the given (typically converged) covariance.

    Reuses the transition assembly, so the frozen blocks are arithmetically
    identical to what the time-varying observer would apply at this
    covariance.
    """
    selectors = selectors or build_selectors(model)
    operator, infos = build_transition(Pbar, model, selectors, rtol=rtol)
    n = model.n
    nodes = []
    for sel, info, K_i in zip(selectors.per_node, infos, operator.K_blocks):
        i = sel.node
        rows = slice((i - 1) * n, i * n)
        D = {j: operator.T[rows, (j - 1) * n : j * n].copy() for j in sel.neighbors}
        nodes.append(
            NodeGains(i=i, neighbors=sel.neighbors, D=D, F=K_i.copy(), Omega=info.total.copy())
        )
    return GainSet(
        n=n,
        N=model.N,
        nodes=tuple(nodes),
        iterations=iterations,
        final_delta=final_delta,
        epsilon=epsilon,
        pbar=Pbar,
    )


def synthesize(model: NetworkModel, config: SynthesisConfig | None = None) -> GainSet:
    """Run the full offline pipeline: iterate to the fixed point, then freeze gains."""
    config = config or SynthesisConfig()
    selectors = build_selectors(model)
    result = iterate_to_fixed_point(model, config, selectors)
    return compute_gains(
        result.pbar,
        model,
        selectors,
        iterations=result.iterations,
        final_delta=result.final_delta,
        epsilon=config.epsilon,
        rtol=config.pinv_rtol,
    )


def closed_loop_matrix(gains: GainSet) -> np.ndarray:
    """Global error transition of the frozen-gain observer (D blocks only)."""
    n, N = gains.n, gains.N
    L = np.zeros((N * n, N * n))
    for node in gains.nodes:
        rows = slice((node.i - 1) * n, node.i * n)
        for j in node.neighbors:
            L[rows, (j - 1) * n : j * n] = node.D[j]
    return L


def closed_loop_spectral_radius(gains: GainSet, model: NetworkModel | None = None) -> float:
    """Spectral radius of the frozen-gain error dynamics; below 1 means stable."""
    return spectral_radius(closed_loop_matrix(gains))


def gain_identity_residual(gains: GainSet, model: NetworkModel) -> float:
    """Largest entrywise violation of sum_j D_ij + F_i C_i = A over all nodes."""
    worst = 0.0
    for node_gains, node in zip(gains.nodes, model.nodes):
        total = sum(node_gains.D[j] for j in node_gains.neighbors)
        if node.m:
            total = total + node_gains.F @ node.C
        worst = max(worst, float(np.abs(total - model.A).max()))
    return worst


# ---------------------------------------------------------------------------
# Gain files
# ---------------------------------------------------------------------------
#
# JSON schema:
#   {"n":.., "N":..,
#    "nodes":[{"i":.., "neighbors":[..], "D":{"j":[[..]]}, "F":[[..]], "Omega":[[..]]}],
#    "meta":{"iterations":.., "final_delta":.., "epsilon":..}}
# Floats round-trip exactly (shortest-repr decimal serialization).


def gains_dict(gains: GainSet) -> dict:
    return {
        "n": gains.n,
        "N": gains.N,
        "nodes": [
            {
                "i": node.i,
                "neighbors": list(node.neighbors),
                "D": {str(j): node.D[j].tolist() for j in node.neighbors},
                "F": node.F.tolist(),
                "Omega": node.Omega.tolist(),
            }
            for node in gains.nodes
        ],
        "meta": {
            "iterations": gains.iterations,
            "final_delta": float(gains.final_delta),
            "epsilon": float(gains.epsilon),
        },
    }


def save_gains(gains: GainSet, path) -> None:
    write_json_atomic(path, gains_dict(gains))


def load_gains(path) -> GainSet:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    n = int(data["n"])
    N = int(data["N"])
    nodes = []
    for entry in data["nodes"]:
        nbrs = tuple(int(j) for j in entry["neighbors"])
        D = {int(j): np.array(entry["D"][str(j)], dtype=float) for j in nbrs}
        for j, block in D.items():
            if block.shape != (n, n):
                raise DimensionMismatch(f"gain D[{entry['i']},{j}] must be {n}x{n}")
        F = np.array(entry["F"], dtype=float).reshape(n, -1)
        nodes.append(
            NodeGains(
                i=int(entry["i"]),
                neighbors=nbrs,
                D=D,
                F=F,
                Omega=np.array(entry["Omega"], dtype=float),
            )
        )
    meta = data.get("meta", {})
    return GainSet(
        n=n,
        N=N,
        nodes=tuple(nodes),
        iterations=int(meta.get("iterations", 0)),
        final_delta=float(meta.get("final_delta", float("nan"))),
        epsilon=float(meta.get("epsilon", float("nan"))),
    )
