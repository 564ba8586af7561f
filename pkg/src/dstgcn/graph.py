"""Road-network graphs, fixed transition matrices and the diffusion polynomial basis."""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch


class GraphKind(str, enum.Enum):
    SENSOR_DISTANCE = "sensor-distance"
    LINK_CONNECTIVITY = "link-connectivity"


@dataclass(frozen=True)
class TrafficGraph:
    """Directed weighted road network.

    ``adjacency[i, j]`` is the proximity weight from node ``i`` to node ``j``.
    ``distances`` is only required for sensor graphs, where it drives
    spatially correlated masking.
    """

    node_ids: tuple
    adjacency: np.ndarray
    kind: GraphKind = GraphKind.LINK_CONNECTIVITY
    distances: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        adjacency = np.asarray(self.adjacency, dtype=np.float64)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "kind", GraphKind(self.kind))
        n = len(self.node_ids)
        if adjacency.shape != (n, n):
            raise ValueError(f"adjacency shape {adjacency.shape} does not match {n} node ids")
        if not np.all(np.isfinite(adjacency)) or np.any(adjacency < 0):
            raise ValueError("adjacency entries must be finite and nonnegative")
        if self.kind is GraphKind.LINK_CONNECTIVITY and not np.all(np.isin(adjacency, (0.0, 1.0))):
            raise ValueError("link-connectivity adjacency must be binary")
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)
        if self.distances is not None:
            distances = np.asarray(self.distances, dtype=np.float64)
            if distances.shape != (n, n):
                raise ValueError(f"distance shape {distances.shape} does not match {n} node ids")
            _check_distances(distances)
            distances.setflags(write=False)
            object.__setattr__(self, "distances", distances)
        elif self.kind is GraphKind.SENSOR_DISTANCE:
            raise ValueError("sensor-distance graphs require a distance matrix")

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    def index_of(self, node_id) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def transitions(self) -> "TransitionPair":
        return compute_transitions(self.adjacency)


@dataclass(frozen=True)
class TransitionPair:
    forward: np.ndarray
    backward: np.ndarray


def _check_distances(distances: np.ndarray) -> None:
    if distances.ndim != 2 or distances.shape[0] != distances.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {distances.shape}")
    if np.any(np.isnan(distances)):
        raise ValueError("distance matrix contains NaN")
    if np.any(distances < 0):
        raise ValueError("distances must be nonnegative")


def build_gaussian_adjacency(distances, kappa: float, delta: Optional[float] = None) -> np.ndarray:
    """Thresholded Gaussian kernel ``exp(-(d/delta)^2)`` for ``d <= kappa``, else 0.

    ``delta`` defaults to the standard deviation of the finite off-diagonal
    distances. ``+inf`` marks an unmeasured pair and always yields 0.
    """
    distances = np.asarray(distances, dtype=np.float64)
    _check_distances(distances)
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if delta is None:
        off_diag = distances[~np.eye(len(distances), dtype=bool)]
        off_diag = off_diag[np.isfinite(off_diag)]
        delta = float(off_diag.std()) if off_diag.size else 0.0
        if delta == 0.0:
            raise ValueError("cannot derive delta: off-diagonal distances have zero spread")
    if delta <= 0:
        raise ValueError("delta must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        kernel = np.exp(-np.square(distances / delta))
    return np.where(distances <= kappa, kernel, 0.0)


def build_binary_adjacency(edges: Sequence[tuple], n: int) -> np.ndarray:
    adjacency = np.zeros((n, n))
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) out of range for {n} nodes")
        adjacency[i, j] = 1.0
    return adjacency


def _row_normalize(matrix: np.ndarray) -> np.ndarray:
    sums = matrix.sum(axis=1)
    out = np.zeros_like(matrix)
    nonzero = sums > 0
    out[nonzero] = matrix[nonzero] / sums[nonzero, None]
    # sink / isolated node: unit self-loop keeps the row stochastic
    idx = np.flatnonzero(~nonzero)
    out[idx, idx] = 1.0
    return out


def compute_transitions(adjacency) -> TransitionPair:
    """Forward ``A / rowsum(A)`` and backward ``A^T / rowsum(A^T)`` transitions."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {adjacency.shape}")
    if np.any(adjacency < 0):
        raise ValueError("adjacency must be nonnegative")
    return TransitionPair(_row_normalize(adjacency), _row_normalize(adjacency.T))


def chebyshev_basis(M, K: int) -> list:
    """``[F_0, ..., F_K]`` with ``F_0 = I``, ``F_1 = M``, ``F_k = 2 M F_{k-1} - F_{k-2}``.

    Works on numpy arrays and torch tensors; leading dimensions are batch
    dimensions over stacks of square matrices.
    """
    if K < 0:
        raise ValueError("K must be nonnegative")
    n = M.shape[-1]
    if M.shape[-2] != n:
        raise ValueError(f"expected square matrices, got shape {tuple(M.shape)}")
    if isinstance(M, torch.Tensor):
        eye = torch.eye(n, dtype=M.dtype, device=M.device).expand(M.shape)
    else:
        M = np.asarray(M)
        eye = np.broadcast_to(np.eye(n, dtype=M.dtype), M.shape)
    basis = [eye]
    if K >= 1:
        basis.append(M)
    for _ in range(2, K + 1):
        basis.append(2 * (M @ basis[-1]) - basis[-2])
    return basis


# --- triplet files -------------------------------------------------------

def read_triplets(path) -> list:
    """Parse ``src,dst,weight`` lines; ``#`` comments and blank lines are skipped."""
    triplets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'src,dst,weight', got {line!r}")
            try:
                weight = float(parts[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad weight {parts[2]!r}") from None
            if not np.isfinite(weight) or weight < 0:
                raise ValueError(f"{path}:{lineno}: weight must be finite and nonnegative")
            triplets.append((parts[0], parts[1], weight))
    return triplets


def _triplets_to_matrix(triplets, index, fill) -> np.ndarray:
    matrix = np.full((len(index), len(index)), fill, dtype=np.float64)
    for src, dst, weight in triplets:
        if src not in index or dst not in index:
            raise ValueError(f"edge {src}->{dst} references a node not in the node list")
        matrix[index[src], index[dst]] = weight
    return matrix


def load_graph(adjacency_path, distances_path=None, node_ids=None, kind=None) -> TrafficGraph:
    """Load a graph from triplet files.

    Node order follows ``node_ids`` when given (normally the speed-matrix
    header), otherwise order of first appearance. Without a distance file
    the graph is treated as binary link connectivity.
    """
    triplets = read_triplets(adjacency_path)
    dist_triplets = read_triplets(distances_path) if distances_path else None
    if node_ids is None:
        seen = {}
        for src, dst, _ in triplets + (dist_triplets or []):
            seen.setdefault(src, None)
            seen.setdefault(dst, None)
        node_ids = list(seen)
    node_ids = [str(n) for n in node_ids]
    index = {nid: i for i, nid in enumerate(node_ids)}
    adjacency = _triplets_to_matrix(triplets, index, 0.0)
    distances = None
    if dist_triplets is not None:
        distances = _triplets_to_matrix(dist_triplets, index, np.inf)
        np.fill_diagonal(distances, 0.0)
    if kind is None:
        kind = GraphKind.SENSOR_DISTANCE if distances is not None else GraphKind.LINK_CONNECTIVITY
    return TrafficGraph(node_ids, adjacency, kind, distances)


def _write_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_graph(graph: TrafficGraph, adjacency_path, distances_path=None) -> None:
    ids = graph.node_ids
    lines = [f"# {graph.kind.value} graph, {graph.num_nodes} nodes"]
    for i, j in zip(*np.nonzero(graph.adjacency)):
        lines.append(f"{ids[i]},{ids[j]},{float(graph.adjacency[i, j])!r}")
    _write_atomic(adjacency_path, "\n".join(lines) + "\n")
    if distances_path is not None and graph.distances is not None:
        lines = ["# distances in miles"]
        for i, j in zip(*np.nonzero(np.isfinite(graph.distances))):
            lines.append(f"{ids[i]},{ids[j]},{float(graph.distances[i, j])!r}")
        _write_atomic(distances_path, "\n".join(lines) + "\n")
