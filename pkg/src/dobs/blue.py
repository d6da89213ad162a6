"""Static BLUE estimation and the per-node fuse/correct/predict kernel.

Each node of the distributed observer repeatedly forms the best linear
unbiased estimate (BLUE) of the state from the stack of its neighbors'
correlated estimates, folds in its own measurement in information form, and
predicts through the dynamics. The structural selector matrices built here
extract a node's neighborhood slice from globally stacked vectors and
covariances; they are exact 0/1 matrices, so their algebraic identities hold
in exact arithmetic and are tested that way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, RankDeficient
from .linalg import PINV_RTOL, pinv_sym, require_spd, solve_info, symmetrize
from .model import NetworkModel, SensorSpec, neighbors


def blue(F, P, y, *, rank_rtol: float = PINV_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """Best linear unbiased estimate of x from y = F x + e with e ~ N(0, P).

    Returns ``(xhat, cov)`` where xhat solves the weighted normal equations
    (F' P^-1 F) xhat = F' P^-1 y and cov = (F' P^-1 F)^-1 is the estimation
    error covariance.
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    P = require_spd(P, "P")
    if F.ndim != 2:
        raise DimensionMismatch(f"F must be 2-d, got shape {F.shape}")
    if P.shape[0] != F.shape[0] or y.shape != (F.shape[0],):
        raise DimensionMismatch(
            f"incompatible shapes: F {F.shape}, P {P.shape}, y {y.shape}"
        )
    PiF = np.linalg.solve(P, F)
    info = symmetrize(F.T @ PiF)
    sv = np.linalg.svd(info, compute_uv=False)
    if sv.size == 0 or sv[-1] <= rank_rtol * sv[0]:
        raise RankDeficient("F'P^-1F is singular; F does not have full column rank")
    cov = symmetrize(np.linalg.inv(info))
    xhat = cov @ (PiF.T @ y)
    return xhat, cov


@dataclass(frozen=True)
class NodeSelectors:
    """Structural matrices that extract one node's neighborhood from global stacks.

    ``eta`` pulls the neighborhood block-rows out of the N*n global stack,
    ``one`` stacks identities (one per neighbor), and ``gamma[j]`` places an
    identity at neighbor j's slot. ``idx`` holds the same selection as flat
    row indices for fast slicing of the global covariance.
    """

    node: int
    neighbors: tuple[int, ...]
    idx: np.ndarray
    eta: np.ndarray
    one: np.ndarray
    gamma: dict[int, np.ndarray]

    @property
    def k(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True)
class SelectorSet:
    n: int
    N: int
    per_node: tuple[NodeSelectors, ...]

    def for_node(self, i: int) -> NodeSelectors:
        return self.per_node[i - 1]


def build_selectors(model: NetworkModel) -> SelectorSet:
    """Selector matrices for every node, ordered by the neighbor-list contract."""
    n, N = model.n, model.N
    eye_n = np.eye(n)
    per_node = []
    for i in range(1, N + 1):
        nbrs = neighbors(model, i)
        k = len(nbrs)
        picks = np.zeros((k, N))
        for a, j in enumerate(nbrs):
            picks[a, j - 1] = 1.0
        eta = np.kron(picks, eye_n)
        one = np.kron(np.ones((k, 1)), eye_n)
        gamma = {}
        for j in nbrs:
            e_j = np.zeros((N, 1))
            e_j[j - 1, 0] = 1.0
            gamma[j] = eta @ np.kron(e_j, eye_n)
        idx = np.concatenate([np.arange((j - 1) * n, j * n) for j in nbrs])
        for arr in (eta, one, *gamma.values()):
            arr.setflags(write=False)
        per_node.append(
            NodeSelectors(node=i, neighbors=tuple(nbrs), idx=idx, eta=eta, one=one, gamma=gamma)
        )
    return SelectorSet(n=n, N=N, per_node=tuple(per_node))


def fusion_weights(
    sel: NodeSelectors, Pbar: np.ndarray, rtol: float = PINV_RTOL
) -> tuple[np.ndarray, np.ndarray]:
    """Neighborhood fusion operator of one node at the given global covariance.

    Returns ``(W, fused_info)``: W is the n x (k n) row operator whose block j
    weights neighbor j's estimate, and fused_info = W summed blockwise is the
    information matrix of the fused neighborhood estimate. Rank-deficient
    neighborhood covariances (e.g. perfectly correlated estimates) go through
    the toleranced pseudo-inverse.
    """
    n = sel.one.shape[1]
    k = sel.k
    M = Pbar[np.ix_(sel.idx, sel.idx)]
    G = pinv_sym(M, rtol=rtol)
    W = G.reshape(k, n, k * n).sum(axis=0)
    fused_info = symmetrize(W.reshape(n, k, n).sum(axis=1))
    return W, fused_info


def _global_cov_array(Pbar) -> np.ndarray:
    return np.asarray(getattr(Pbar, "P", Pbar), dtype=float)


def fuse_neighbors(
    i: int, selectors: SelectorSet, Pbar, xbars, *, rtol: float = PINV_RTOL
) -> tuple[np.ndarray, np.ndarray]:
    """BLUE fusion of node i's neighborhood estimates.

    ``xbars`` must be ordered like the node's neighbor list; ``Pbar`` is the
    global (N n, N n) cross-covariance of all node estimates (or an object
    exposing it as ``.P``). Raises SingularInformation when the fused
    information matrix cannot determine an estimate on its own; callers that
    also hold a measurement combine the information matrices before inverting.
    """
    sel = selectors.for_node(i)
    n = selectors.n
    P = _global_cov_array(Pbar)
    if P.shape != (selectors.N * n, selectors.N * n):
        raise DimensionMismatch(
            f"global covariance must be {selectors.N * n}x{selectors.N * n}, got {P.shape}"
        )
    stack = np.concatenate([np.asarray(x, dtype=float).reshape(-1) for x in xbars])
    if stack.shape[0] != sel.k * n:
        raise DimensionMismatch(
            f"node {i} expects {sel.k} neighbor estimates of dimension {n}"
        )
    W, fused_info = fusion_weights(sel, P, rtol=rtol)
    xtilde = solve_info(fused_info, W @ stack, node=i)
    return xtilde, fused_info


def sensing_products(node: SensorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Measurement information products (S, W) with S = C'R^-1 C and W = C'R^-1."""
    n = node.C.shape[1]
    if node.m == 0:
        return np.zeros((n, n)), np.zeros((n, 0))
    W = np.linalg.solve(node.R, node.C).T
    return symmetrize(W @ node.C), W


def correct(
    xtilde, fused_info, node: SensorSpec, y_i
) -> tuple[np.ndarray, np.ndarray]:
    """Fold node's own measurement into the fused estimate, information-form.

    Solves (fused_info + C'R^-1C) x = fused_info xtilde + C'R^-1 y. A relay
    node (no measurement rows) returns its inputs unchanged; a node with no
    prior information returns the measurement-only estimate.
    """
    xtilde = np.asarray(xtilde, dtype=float)
    fused_info = np.asarray(fused_info, dtype=float)
    if node.m == 0:
        return xtilde, fused_info
    S, W = sensing_products(node)
    info = symmetrize(fused_info + S)
    rhs = fused_info @ xtilde + W @ np.asarray(y_i, dtype=float)
    return solve_info(info, rhs), info


def predict(xhat, A) -> np.ndarray:
    """One-step prediction of an estimate through the dynamics."""
    A = np.asarray(A, dtype=float)
    x = np.asarray(xhat, dtype=float)
    if A.ndim == 0:
        return A * x
    return A @ x


@dataclass(frozen=True)
class NodeInformation:
    """Information matrices of one node at one covariance iterate."""

    fused: np.ndarray    # information of the fused neighborhood estimate
    sensing: np.ndarray  # C'R^-1 C, constant in time
    total: np.ndarray    # fused + sensing; inverted in the state update
