"""Missing-pattern generators (RM, TCM, SCM, BM) and mask application.

Masks are ``N x T`` arrays with 1 = observed and 0 = missing. Every
generator draws from a caller-owned ``numpy.random.Generator``.
"""
from __future__ import annotations

import enum
import hashlib
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import GraphKind, TrafficGraph


class Pattern(str, enum.Enum):
    RM = "rm"
    TCM = "tcm"
    SCM = "scm"
    BM = "bm"

    @classmethod
    def parse(cls, value) -> "Pattern":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown missing pattern {value!r}; expected one of rm, tcm, scm, bm") from None


def _check_ratio(r: float) -> None:
    if not (0.0 <= r < 1.0):
        raise ValueError(f"missing ratio must lie in [0, 1), got {r}")


@dataclass(frozen=True)
class MissingSpec:
    pattern: Pattern
    ratio: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern.parse(self.pattern))
        _check_ratio(self.ratio)


@dataclass(frozen=True)
class MaskMatrix:
    values: np.ndarray
    pattern: Pattern
    ratio: float
    seed: Optional[int] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {values.shape}")
        if not np.all((values == 0) | (values == 1)):
            raise ValueError("mask entries must be 0 or 1")
        values = values.astype(np.uint8)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pattern", Pattern.parse(self.pattern))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def missing(self) -> np.ndarray:
        return self.values == 0

    def missing_fraction(self) -> float:
        return float(self.missing.mean())


# --- spatial neighbourhoods ---------------------------------------------

_ORDER_CACHE: dict = {}


def _graph_key(graph: TrafficGraph) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(graph.kind.value.encode())
    h.update(graph.adjacency.tobytes())
    if graph.distances is not None:
        h.update(graph.distances.tobytes())
    return h.digest()


def _bfs_order(neighbours: list, start: int) -> list:
    n = len(neighbours)
    seen = np.zeros(n, dtype=bool)
    order = []
    queue = deque([start])
    seen[start] = True
    while len(order) < n:
        if not queue:
            # disconnected: resume from the lowest-index unvisited node
            nxt = int(np.flatnonzero(~seen)[0])
            seen[nxt] = True
            queue.append(nxt)
        u = queue.popleft()
        order.append(u)
        for w in neighbours[u]:
            if not seen[w]:
                seen[w] = True
                queue.append(w)
    return order


def proximity_order(graph: TrafficGraph) -> np.ndarray:
    """Row ``v`` lists all nodes from nearest to farthest from ``v`` (``v`` first).

    Sensor graphs rank by the shorter of the two directed distances; link
    graphs rank by breadth-first discovery over undirected connectivity.
    Ties go to the lower node index.
    """
    key = _graph_key(graph)
    cached = _ORDER_CACHE.get(key)
    if cached is not None:
        return cached
    n = graph.num_nodes
    if graph.kind is GraphKind.SENSOR_DISTANCE:
        if graph.distances is None:
            raise ValueError("sensor-distance graph has no distance matrix")
        d = np.minimum(graph.distances, graph.distances.T).copy()
        np.fill_diagonal(d, -1.0)  # v itself always comes first
        order = np.stack([np.lexsort((np.arange(n), d[v])) for v in range(n)])
    else:
        connected = (graph.adjacency + graph.adjacency.T) > 0
        np.fill_diagonal(connected, False)
        neighbours = [np.flatnonzero(connected[u]).tolist() for u in range(n)]
        order = np.array([_bfs_order(neighbours, v) for v in range(n)])
    order.setflags(write=False)
    _ORDER_CACHE[key] = order
    return order


def nearest_nodes(graph: TrafficGraph, v: int, k: int) -> np.ndarray:
    return proximity_order(graph)[v, :k]


# --- generators ----------------------------------------------------------

def gen_rm(N: int, T: int, r: float, rng: np.random.Generator) -> MaskMatrix:
    """Each entry independently missing with probability ``r``."""
    _check_ratio(r)
    observed = rng.random((N, T)) >= r
    return MaskMatrix(observed.astype(np.uint8), Pattern.RM, r)


def tcm_missing_steps(start: int, T: int, length: int) -> np.ndarray:
    """Zero-based steps of a run of ``length`` starting at ``start``, wrapping past ``T``."""
    return (start + np.arange(length)) % T


def gen_tcm(N: int, T: int, r: float, rng: np.random.Generator) -> MaskMatrix:
    """One run of ``floor(T*r)`` consecutive missing steps per node, wrapping cyclically."""
    _check_ratio(r)
    length = int(np.floor(T * r))
    values = np.ones((N, T), dtype=np.uint8)
    starts = rng.integers(0, T, size=N)
    for v, start in enumerate(starts):
        values[v, tcm_missing_steps(int(start), T, length)] = 0
    return MaskMatrix(values, Pattern.TCM, r)


def _check_graph(graph: TrafficGraph, N: int) -> None:
    if graph is None:
        raise ValueError("spatially correlated patterns need a graph")
    if graph.num_nodes != N:
        raise ValueError(f"graph has {graph.num_nodes} nodes, mask needs {N}")


def gen_scm(graph: TrafficGraph, N: int, T: int, r: float, rng: np.random.Generator) -> MaskMatrix:
    """Per time slot, the ``floor(N*r)`` nodes nearest a random centre go missing."""
    _check_ratio(r)
    _check_graph(graph, N)
    k = int(np.floor(N * r))
    order = proximity_order(graph)
    values = np.ones((N, T), dtype=np.uint8)
    centres = rng.integers(0, N, size=T)
    for t, v in enumerate(centres):
        values[order[v, :k], t] = 0
    return MaskMatrix(values, Pattern.SCM, r)


def bm_blocks(N: int, T: int, rng: np.random.Generator) -> list:
    """Draw the block schedule: zero-based half-open ``(start, stop, centre)`` triples.

    With one-based cursor ``i``, each block length is ``a ~ U{1, ..., T - i}``
    and the cursor advances by ``a``, so blocks tile ``[0, T)`` without
    overlap. Once ``i`` reaches ``T`` the last column forms its own block.
    """
    blocks = []
    i = 1
    while i <= T:
        a = int(rng.integers(1, T - i + 1)) if T - i >= 1 else 1
        v = int(rng.integers(0, N))
        blocks.append((i - 1, i - 1 + a, v))
        i += a
    return blocks


def gen_bm(graph: TrafficGraph, N: int, T: int, r: float, rng: np.random.Generator) -> MaskMatrix:
    """Blocks contiguous in time, each masking the nodes nearest a random centre."""
    _check_ratio(r)
    _check_graph(graph, N)
    if T < 2:
        raise ValueError("block missing needs T >= 2")
    k = int(np.floor(N * r))
    order = proximity_order(graph)
    values = np.ones((N, T), dtype=np.uint8)
    for start, stop, v in bm_blocks(N, T, rng):
        values[np.ix_(order[v, :k], np.arange(start, stop))] = 0
    return MaskMatrix(values, Pattern.BM, r)


def generate_mask(pattern, N: int, T: int, r: float, rng: np.random.Generator,
                  graph: Optional[TrafficGraph] = None) -> MaskMatrix:
    pattern = Pattern.parse(pattern)
    if pattern is Pattern.RM:
        return gen_rm(N, T, r, rng)
    if pattern is Pattern.TCM:
        return gen_tcm(N, T, r, rng)
    if pattern is Pattern.SCM:
        return gen_scm(graph, N, T, r, rng)
    return gen_bm(graph, N, T, r, rng)


def mask_from_spec(spec: MissingSpec, N: int, T: int, graph: Optional[TrafficGraph] = None) -> MaskMatrix:
    mask = generate_mask(spec.pattern, N, T, spec.ratio, np.random.default_rng(spec.seed), graph)
    return MaskMatrix(mask.values, mask.pattern, mask.ratio, spec.seed)


def apply_mask(X, E) -> np.ndarray:
    """``X * E`` elementwise; missing entries become exactly 0."""
    X = np.asarray(X, dtype=np.float64)
    values = E.values if isinstance(E, MaskMatrix) else np.asarray(E)
    if X.shape != values.shape:
        raise ValueError(f"data shape {X.shape} != mask shape {values.shape}")
    return np.where(values != 0, X, 0.0)


def save_mask(mask: MaskMatrix, path) -> None:
    np.savetxt(path, mask.values, fmt="%d", delimiter=",")


def load_mask(path, pattern="rm", ratio: float = 0.0) -> MaskMatrix:
    values = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    return MaskMatrix(values, pattern, ratio)
