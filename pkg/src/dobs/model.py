"""Networked LTI estimation model: dynamics, per-node sensing, communication graph.

Node indices are 1-based throughout the public API and in scenario files.
A directed edge (j, i) means node i receives node j's estimate; every node's
neighborhood is closed (it always contains the node itself).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatch, InvalidArgument
from .linalg import PINV_RTOL, require_spd, toleranced_rank


def _frozen_array(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SensorSpec:
    """One node's sensing model: y = C x + v with v ~ N(0, R).

    A node with zero measurement rows (m = 0) is a pure relay.
    """

    C: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        C = _frozen_array(self.C)
        R = _frozen_array(self.R)
        if C.ndim != 2:
            raise DimensionMismatch(f"C must be 2-d, got shape {C.shape}")
        if R.shape != (C.shape[0], C.shape[0]):
            raise DimensionMismatch(
                f"R must be {C.shape[0]}x{C.shape[0]} to match C, got {R.shape}"
            )
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", R)

    @property
    def m(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class NetworkModel:
    """Immutable description of the networked estimation problem.

    All matrices are read-only after construction, so a model can be shared
    across concurrent tasks.
    """

    A: np.ndarray
    Q: np.ndarray
    nodes: tuple[SensorSpec, ...]
    edges: frozenset[tuple[int, int]]
    _in_neighbors: tuple[tuple[int, ...], ...] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self):
        A = _frozen_array(self.A)
        Q = _frozen_array(self.Q)
        nodes = tuple(self.nodes)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        if Q.shape != (n, n):
            raise DimensionMismatch(f"Q must be {n}x{n}, got {Q.shape}")
        if not nodes:
            raise InvalidArgument("model needs at least one node")
        for i, node in enumerate(nodes, start=1):
            if node.C.shape[1] != n:
                raise DimensionMismatch(
                    f"node {i}: C has {node.C.shape[1]} columns, state dimension is {n}"
                )
        N = len(nodes)
        edges = frozenset((int(j), int(i)) for j, i in self.edges)
        for j, i in edges:
            if not (1 <= j <= N and 1 <= i <= N):
                raise InvalidArgument(f"edge ({j},{i}) references a node outside 1..{N}")
        incoming: list[set[int]] = [{i} for i in range(1, N + 1)]
        for j, i in edges:
            incoming[i - 1].add(j)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(
            self, "_in_neighbors", tuple(tuple(sorted(s)) for s in incoming)
        )

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return len(self.nodes)


def neighbors(model: NetworkModel, i: int) -> list[int]:
    """Closed in-neighborhood of node i, sorted ascending.

    The ordering is a contract: selector matrices and gain files index
    neighborhood stacks in exactly this order.
    """
    if not (1 <= i <= model.N):
        raise InvalidArgument(f"node index {i} out of range 1..{model.N}")
    return list(model._in_neighbors[i - 1])


@dataclass
class ValidationReport:
    collective_detectability: bool
    per_node_observability: list[bool]
    strongly_connected: bool
    warnings: list[str]


def _pbh_detectable(A: np.ndarray, C: np.ndarray, rtol: float) -> bool:
    """Eigenvalue rank test: every mode on or outside the unit circle must be seen by C."""
    n = A.shape[0]
    eye = np.eye(n)
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0 - 1e-8:
            continue
        pencil = np.vstack([A - lam * eye, C.astype(complex)])
        if toleranced_rank(pencil, rtol) < n:
            return False
    return True


def _strongly_connected(model: NetworkModel) -> bool:
    N = model.N
    adj = np.eye(N, dtype=np.int8)
    for j, i in model.edges:
        adj[j - 1, i - 1] = 1
    count, _ = connected_components(csr_matrix(adj), directed=True, connection="strong")
    return int(count) == 1


def validate(model: NetworkModel, *, rank_rtol: float = PINV_RTOL) -> ValidationReport:
    """Check noise covariances, detectability, and graph connectivity.

    Collective detectability tests the stacked pair (A, col(C^i)); per-node
    flags run the same test against each node's own C. Missing strong
    connectivity is reported as a warning, not an error.
    """
    require_spd(model.Q, "Q")
    for i, node in enumerate(model.nodes, start=1):
        if node.m:
            require_spd(node.R, f"R of node {i}")
    stacked_C = np.vstack([node.C for node in model.nodes])
    collective = _pbh_detectable(model.A, stacked_C, rank_rtol)
    per_node = [_pbh_detectable(model.A, node.C, rank_rtol) for node in model.nodes]
    strong = _strongly_connected(model)
    warnings: list[str] = []
    if not strong:
        warnings.append("communication graph (with self-loops) is not strongly connected")
    relays = [i for i, node in enumerate(model.nodes, start=1) if node.m == 0]
    if relays:
        warnings.append(f"relay nodes without sensing: {relays}")
    return ValidationReport(
        collective_detectability=collective,
        per_node_observability=per_node,
        strongly_connected=strong,
        warnings=warnings,
    )


def build_ring_benchmark(N: int) -> NetworkModel:
    """Ring-of-differences benchmark: N agents with identity dynamics.

    The state dimension equals the node count. Node i < N measures the two
    differences x_i - x_{i+1} and x_{i-1} - x_i (indices wrap around), while
    node N measures x_N directly, so the network is collectively observable
    even though no single node is. Communication is an undirected ring with
    self-loops, giving every node a closed neighborhood of size 3.
    """
    if N < 3:
        raise InvalidArgument(f"ring benchmark needs N >= 3, got {N}")
    eye = np.eye(N)
    nodes = []
    for i in range(1, N + 1):
        if i == N:
            C = eye[[N - 1], :]
        else:
            prev = N if i == 1 else i - 1
            C = np.vstack([eye[i - 1] - eye[i], eye[prev - 1] - eye[i - 1]])
        nodes.append(SensorSpec(C=C, R=np.eye(C.shape[0])))
    edges: set[tuple[int, int]] = set()
    for i in range(1, N + 1):
        nxt = 1 if i == N else i + 1
        edges |= {(i, nxt), (nxt, i), (i, i)}
    return NetworkModel(A=eye, Q=eye.copy(), nodes=tuple(nodes), edges=frozenset(edges))


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------
#
# JSON schema:
#   {"A": [[...]], "Q": [[...]],
#    "nodes": [{"C": [[...]], "R": [[...]]}, ...],
#    "edges": [[j, i], ...],
#    "P0": [[...]] or {"scaled_identity": s}}
# Matrices are arrays of rows; ragged rows are rejected.


def _as_matrix(obj, name: str, cols: int | None = None) -> np.ndarray:
    if not isinstance(obj, list):
        raise DimensionMismatch(f"{name} must be an array of rows")
    if not obj:
        return np.zeros((0, cols if cols is not None else 0))
    widths = set()
    for row in obj:
        if not isinstance(row, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in row
        ):
            raise DimensionMismatch(f"{name} rows must be lists of numbers")
        widths.add(len(row))
    if len(widths) != 1:
        raise DimensionMismatch(f"{name} has ragged rows (widths {sorted(widths)})")
    mat = np.array(obj, dtype=float)
    if cols is not None and mat.shape[1] != cols:
        raise DimensionMismatch(f"{name} must have {cols} columns, got {mat.shape[1]}")
    return mat


def _parse_p0(obj, n: int) -> np.ndarray:
    if obj is None:
        return np.eye(n)
    if isinstance(obj, dict):
        if set(obj) != {"scaled_identity"}:
            raise DimensionMismatch("P0 object form must be {\"scaled_identity\": s}")
        return float(obj["scaled_identity"]) * np.eye(n)
    return _as_matrix(obj, "P0", cols=n)


def load_scenario(path) -> tuple[NetworkModel, np.ndarray]:
    """Parse a scenario file into a model plus the initial covariance P0."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise DimensionMismatch("scenario file must contain a JSON object")
    for key in ("A", "Q", "nodes", "edges"):
        if key not in data:
            raise DimensionMismatch(f"scenario file is missing '{key}'")
    A = _as_matrix(data["A"], "A")
    n = A.shape[1] if A.size else len(data["A"])
    Q = _as_matrix(data["Q"], "Q", cols=n)
    if not isinstance(data["nodes"], list) or not data["nodes"]:
        raise DimensionMismatch("'nodes' must be a nonempty array")
    nodes = []
    for k, entry in enumerate(data["nodes"], start=1):
        if not isinstance(entry, dict) or "C" not in entry or "R" not in entry:
            raise DimensionMismatch(f"node {k} must be an object with 'C' and 'R'")
        C = _as_matrix(entry["C"], f"node {k} C", cols=n)
        R = _as_matrix(entry["R"], f"node {k} R", cols=C.shape[0] if C.shape[0] else 0)
        nodes.append(SensorSpec(C=C, R=R))
    if not isinstance(data["edges"], list):
        raise DimensionMismatch("'edges' must be an array of [j, i] pairs")
    edges = set()
    for pair in data["edges"]:
        if not (isinstance(pair, list) and len(pair) == 2):
            raise DimensionMismatch("each edge must be a [j, i] pair")
        edges.add((int(pair[0]), int(pair[1])))
    model = NetworkModel(A=A, Q=Q, nodes=tuple(nodes), edges=frozenset(edges))
    P0 = _parse_p0(data.get("P0"), model.n)
    return model, P0


def scenario_dict(model: NetworkModel, P0=None) -> dict:
    out = {
        "A": model.A.tolist(),
        "Q": model.Q.tolist(),
        "nodes": [{"C": node.C.tolist(), "R": node.R.tolist()} for node in model.nodes],
        "edges": sorted([j, i] for j, i in model.edges),
    }
    if P0 is not None:
        if np.ndim(P0) == 0:
            out["P0"] = {"scaled_identity": float(P0)}
        else:
            out["P0"] = np.asarray(P0, dtype=float).tolist()
    return out


def write_json_atomic(path, payload: dict) -> None:
    """Serialize to a temp file in the target directory, then rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_scenario(model: NetworkModel, path, P0=None) -> None:
    write_json_atomic(path, scenario_dict(model, P0))
