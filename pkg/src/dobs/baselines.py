"""Reference estimators: centralized Kalman filter and a consensus-on-information filter.

Both follow the prediction convention used everywhere in this package: a
state holds the predicted estimate of x_t before y_t is processed, and one
step consumes y_t to produce the prediction for t+1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .blue import sensing_products
from .errors import InvalidArgument, MaxIterationsExceeded, SingularInformation
from .linalg import inv_info, pinv_sym, require_spd, solve_info, symmetrize
from .model import NetworkModel, neighbors


@dataclass
class CentralizedKfState:
    """Predicted estimate and covariance of the all-measurements Kalman filter."""

    xbar: np.ndarray
    Pbar: np.ndarray


def stacked_sensing(model: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """Stack every node's (C, R) into one measurement model."""
    C = np.vstack([node.C for node in model.nodes])
    blocks = [node.R for node in model.nodes if node.m]
    R = block_diag(*blocks) if blocks else np.zeros((0, 0))
    return C, R


def stack_measurements(ys) -> np.ndarray:
    return np.concatenate([np.asarray(y, dtype=float).reshape(-1) for y in ys])


def centralized_step(
    state: CentralizedKfState, y_all: np.ndarray, model: NetworkModel
) -> CentralizedKfState:
    """One correction-plus-prediction step on the stacked measurement.

    Correction is done in information form, P = (C'R^-1 C + Pbar^-1)^-1, which
    stays well defined for very large priors.
    """
    Pbar = require_spd(state.Pbar, "Pbar")
    C, R = stacked_sensing(model)
    y_all = np.asarray(y_all, dtype=float).reshape(-1)
    if C.shape[0]:
        CtRinv = np.linalg.solve(R, C).T
        info = symmetrize(CtRinv @ C + np.linalg.inv(Pbar))
        P = inv_info(info)
        xhat = state.xbar + P @ (CtRinv @ (y_all - C @ state.xbar))
    else:
        P = Pbar
        xhat = state.xbar
    return CentralizedKfState(
        xbar=model.A @ xhat,
        Pbar=symmetrize(model.A @ P @ model.A.T + model.Q),
    )


def centralized_covariance_step(Pbar: np.ndarray, model: NetworkModel) -> np.ndarray:
    """Predicted-covariance recursion of the centralized filter."""
    C, R = stacked_sensing(model)
    if C.shape[0]:
        info = symmetrize(np.linalg.solve(R, C).T @ C + np.linalg.inv(Pbar))
        P = inv_info(info)
    else:
        P = Pbar
    return symmetrize(model.A @ P @ model.A.T + model.Q)


def centralized_steady_covariance(
    model: NetworkModel,
    tol: float = 1e-10,
    max_iterations: int = 100000,
    P0: np.ndarray | None = None,
) -> np.ndarray:
    """Iterate the predicted-covariance recursion from the identity until it settles."""
    P = np.eye(model.n) if P0 is None else require_spd(P0, "P0")
    delta = np.inf
    for _ in range(max_iterations):
        P_next = centralized_covariance_step(P, model)
        delta = float(np.linalg.norm(P_next - P, "fro"))
        P = P_next
        if delta < tol:
            return P
    raise MaxIterationsExceeded(
        f"centralized covariance did not settle within {max_iterations} iterations",
        iterations=max_iterations,
        final_delta=delta,
    )


def metropolis_weights(model: NetworkModel) -> np.ndarray:
    """Row-stochastic consensus weights: w_ij = 1/(1+max(deg_i, deg_j)) off-diagonal.

    Degrees count neighbors other than the node itself; the diagonal absorbs
    whatever is left so each row sums to one exactly.
    """
    N = model.N
    degrees = [len(neighbors(model, i)) - 1 for i in range(1, N + 1)]
    W = np.zeros((N, N))
    for i in range(1, N + 1):
        for j in neighbors(model, i):
            if j != i:
                W[i - 1, j - 1] = 1.0 / (1.0 + max(degrees[i - 1], degrees[j - 1]))
        W[i - 1, i - 1] = 1.0 - W[i - 1].sum()
    return W


@dataclass
class ConsensusNodeState:
    """Prior information pair of one consensus node plus its consensus weight row."""

    Omega: np.ndarray
    q: np.ndarray
    weights: np.ndarray


def consensus_init(
    model: NetworkModel, x0_mean: np.ndarray, P0: np.ndarray
) -> list[ConsensusNodeState]:
    Omega0 = inv_info(require_spd(P0, "P0"))
    q0 = Omega0 @ np.asarray(x0_mean, dtype=float)
    W = metropolis_weights(model)
    return [
        ConsensusNodeState(Omega=Omega0.copy(), q=q0.copy(), weights=W[i - 1].copy())
        for i in range(1, model.N + 1)
    ]


def consensus_estimates(states: list[ConsensusNodeState]) -> np.ndarray:
    """Predicted estimate of every node, recovered from its information pair."""
    return np.array([solve_info(st.Omega, st.q) for st in states])


def consensus_dkf_step(
    states: list[ConsensusNodeState],
    ys,
    model: NetworkModel,
    rounds: int = 1,
    *,
    reweight: bool = True,
) -> tuple[list[ConsensusNodeState], list[bool]]:
    """One sampling interval of the consensus-on-information filter.

    Every node folds its measurement into its prior information pair, the
    network runs ``rounds`` synchronous Metropolis-weighted averaging passes
    over closed neighborhoods, and each node converts back to covariance form
    and predicts through the dynamics. With ``reweight`` the averaged
    information is scaled by the node count before prediction, so it
    approximates the network-total information instead of the network mean.

    A node whose averaged information cannot be factorized falls back to
    prediction from its own prior and is flagged in the returned list.
    """
    if rounds < 1:
        raise InvalidArgument(f"consensus rounds must be >= 1, got {rounds}")
    N, n = model.N, model.n
    A, Q = model.A, model.Q
    pairs = []
    for st, node, y in zip(states, model.nodes, ys):
        S, CtRinv = sensing_products(node)
        q = st.q + (CtRinv @ np.asarray(y, dtype=float) if node.m else 0.0)
        pairs.append((symmetrize(st.Omega + S), q))
    nbr_lists = [neighbors(model, i) for i in range(1, N + 1)]
    for _ in range(rounds):
        merged = []
        for i in range(1, N + 1):
            w = states[i - 1].weights
            Om = np.zeros((n, n))
            q = np.zeros(n)
            for j in nbr_lists[i - 1]:
                Om += w[j - 1] * pairs[j - 1][0]
                q += w[j - 1] * pairs[j - 1][1]
            merged.append((Om, q))
        pairs = merged
    scale = float(N) if reweight else 1.0
    new_states: list[ConsensusNodeState] = []
    fallbacks: list[bool] = []
    for i, (Om, q) in enumerate(pairs, start=1):
        prior = states[i - 1]
        try:
            xhat = solve_info(Om, q, node=i)
            P_eff = inv_info(scale * Om, node=i)
            fell_back = False
        except SingularInformation:
            # prediction-only fallback: carry the node's own prior forward
            P_prior = pinv_sym(prior.Omega)
            xhat = P_prior @ prior.q
            P_eff = P_prior
            fell_back = True
        P_next = symmetrize(A @ P_eff @ A.T + Q)
        Omega_next = inv_info(P_next, node=i)
        new_states.append(
            ConsensusNodeState(
                Omega=Omega_next, q=Omega_next @ (A @ xhat), weights=prior.weights
            )
        )
        fallbacks.append(fell_back)
    return new_states, fallbacks
