"""Speed-matrix files, the synthetic ring-road fixture, and dataset summaries.

Speed files are comma separated: the first line holds the node ids, each
following line is ``timestamp,v_1,...,v_N`` for one time step. A value of 0
means no observation.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional

import numpy as np

from .graph import GraphKind, TrafficGraph, build_binary_adjacency

DEFAULT_START = datetime(2012, 3, 1)
DEFAULT_STEP = timedelta(minutes=5)
STEPS_PER_DAY = 288


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class SpeedMatrix:
    values: np.ndarray  # N x P
    node_ids: tuple
    start_time: datetime = DEFAULT_START
    step: timedelta = DEFAULT_STEP
    timestamps: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "node_ids", tuple(str(n) for n in self.node_ids))
        if values.ndim != 2 or values.shape[0] != len(self.node_ids):
            raise DataError(f"values shape {values.shape} does not match {len(self.node_ids)} node ids")
        bad = np.argwhere(~np.isfinite(values))
        if len(bad):
            v, t = bad[0]
            raise DataError(f"non-finite value at node {self.node_ids[v]!r}, step {t}")
        object.__setattr__(self, "values", values)

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def num_steps(self) -> int:
        return self.values.shape[1]

    def time_labels(self) -> list:
        if self.timestamps is not None:
            return list(self.timestamps)
        return [(self.start_time + i * self.step).isoformat() for i in range(self.num_steps)]

    def with_values(self, values) -> "SpeedMatrix":
        return SpeedMatrix(values, self.node_ids, self.start_time, self.step, self.timestamps)


def _write_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_speed_matrix(matrix: SpeedMatrix, path) -> None:
    lines = [",".join(matrix.node_ids)]
    for label, column in zip(matrix.time_labels(), matrix.values.T):
        lines.append(label + "," + ",".join(repr(float(x)) for x in column))
    _write_atomic(path, "\n".join(lines) + "\n")


def _parse_time(label: str):
    try:
        return datetime.fromisoformat(label)
    except ValueError:
        return None


def load_speed_matrix(path, graph: Optional[TrafficGraph] = None) -> SpeedMatrix:
    """Parse a speed file; rows may omit the timestamp column.

    When ``graph`` is given its node ids must match the header exactly.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if header and header[0].lower() == "timestamp":
        header = header[1:]
    n = len(header)
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], 2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) == n + 1:
            labels.append(parts[0])
            parts = parts[1:]
        elif len(parts) != n:
            raise DataError(f"{path}:{lineno}: expected {n} values, got {len(parts)}")
        row = []
        for col, token in enumerate(parts):
            try:
                value = float(token)
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {col + 1} ({header[col]}): cannot parse {token!r}") from None
            if not np.isfinite(value):
                raise DataError(f"{path}:{lineno}: column {col + 1} ({header[col]}): non-finite value {token!r}")
            row.append(value)
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    if labels and len(labels) != len(rows):
        raise DataError(f"{path}: timestamp column present on some rows only")
    values = np.array(rows, dtype=np.float64).T
    start, step, timestamps = DEFAULT_START, DEFAULT_STEP, None
    if labels:
        timestamps = tuple(labels)
        parsed = [_parse_time(x) for x in labels[:2]]
        if parsed[0] is not None:
            start = parsed[0]
            if len(parsed) > 1 and parsed[1] is not None:
                step = parsed[1] - parsed[0]
    matrix = SpeedMatrix(values, header, start, step, timestamps)
    if graph is not None and tuple(graph.node_ids) != matrix.node_ids:
        raise DataError(f"{path}: node ids do not match graph ({matrix.num_nodes} vs {graph.num_nodes} nodes)")
    return matrix


def save_availability(mask: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(mask, dtype=np.uint8), fmt="%d", delimiter=",")


def load_availability(path, shape: Optional[tuple] = None) -> np.ndarray:
    """Companion 0/1 file marking which entries were genuinely observed."""
    mask = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    if not np.all((mask == 0) | (mask == 1)):
        raise DataError(f"{path}: availability entries must be 0 or 1")
    if shape is not None and mask.shape != tuple(shape):
        raise DataError(f"{path}: availability shape {mask.shape} != data shape {tuple(shape)}")
    return mask.astype(bool)


def ring_graph(n: int) -> TrafficGraph:
    edges = [(i, (i + 1) % n) for i in range(n)] + [((i + 1) % n, i) for i in range(n)]
    return TrafficGraph([f"node_{i}" for i in range(n)], build_binary_adjacency(edges, n),
                        GraphKind.LINK_CONNECTIVITY)


def synthesize_dataset(N: int, P: int, seed: int, noise: float = 1.0,
                       steps_per_day: int = STEPS_PER_DAY) -> tuple:
    """Daily-periodic ring-road speeds, phase-shifted along the ring.

    ``x[v, t] = 55 + 10 sin(2 pi (t / steps_per_day + v / N)) + noise * eps``.
    Returns ``(SpeedMatrix, TrafficGraph)``.
    """
    if N < 2 or P < 2:
        raise ValueError("need at least 2 nodes and 2 steps")
    rng = np.random.default_rng(seed)
    t = np.arange(P)[None, :]
    v = np.arange(N)[:, None]
    values = 55.0 + 10.0 * np.sin(2 * np.pi * (t / steps_per_day + v / N))
    if noise:
        values = values + noise * rng.standard_normal((N, P))
    graph = ring_graph(N)
    return SpeedMatrix(values, graph.node_ids), graph


def describe_dataset(matrix: SpeedMatrix) -> dict:
    observed = matrix.values[matrix.values != 0]
    return {
        "nodes": matrix.num_nodes,
        "steps": matrix.num_steps,
        "observed_fraction": observed.size / matrix.values.size,
        "mean": float(observed.mean()) if observed.size else None,
        "std": float(observed.std()) if observed.size else None,
    }
