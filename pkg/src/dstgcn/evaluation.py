"""Splits, sliding-window imputation, metrics, baselines and experiment grids."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .masking import MaskMatrix, Pattern, generate_mask

MAPE_MIN_TRUTH = 1.0
REPORT_HEADER = ("pattern", "ratio", "model", "mae", "rmse", "mape", "n", "excluded_mape")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        parts = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(p <= 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {parts}")


def split(X, spec: SplitSpec = SplitSpec()) -> tuple:
    """Contiguous (train, val, test) slices along the time axis."""
    X = np.asarray(X)
    P = X.shape[-1]
    if P < 3:
        raise ValueError("need at least 3 time steps to split")
    b1 = int(np.floor(spec.train_fraction * P))
    b2 = int(np.floor((spec.train_fraction + spec.val_fraction) * P))
    if b1 == 0 or b2 == b1 or b2 == P:
        raise ValueError(f"split of {P} steps leaves an empty slice (boundaries {b1}, {b2})")
    return X[..., :b1], X[..., b1:b2], X[..., b2:]


def sliding_windows(P: int, T: int) -> list:
    """``(start, stop, write_from)`` triples; together they write every column once.

    Windows are ``[0, T), [T, 2T), ...``; a ragged tail is covered by the
    overlapping window ``[P - T, P)`` that writes only its new columns.
    """
    if P < T:
        raise ValueError(f"horizon of {P} steps is shorter than the window {T}")
    windows = [(s, s + T, s) for s in range(0, P - T + 1, T)]
    covered = windows[-1][1]
    if covered < P:
        windows.append((P - T, P, covered))
    return windows


def sliding_impute(model, X_masked, T: int, observed=None) -> np.ndarray:
    """Impute a long horizon window by window; observed entries pass through unchanged.

    ``model`` is anything with ``predict(windows, observed)`` over a
    ``(B, N, T)`` stack, or a plain callable with the same signature.
    """
    X = np.asarray(X_masked, dtype=np.float64)
    observed = (X != 0) if observed is None else np.asarray(observed, dtype=bool)
    N, P = X.shape
    windows = sliding_windows(P, T)
    stack = np.stack([X[:, a:b] for a, b, _ in windows])
    obs_stack = np.stack([observed[:, a:b] for a, b, _ in windows])
    predict = model.predict if hasattr(model, "predict") else model
    preds = predict(stack, obs_stack)
    out = np.empty_like(X)
    for (a, b, w), pred in zip(windows, preds):
        out[:, w:b] = pred[:, w - a:]
    return np.where(observed, X, out)


def horizon_mask(pattern, ratio: float, shape: tuple, T: int, rng: np.random.Generator,
                 graph=None) -> np.ndarray:
    """Observed-entry mask over a long horizon, generated window by window."""
    N, P = shape
    pieces = []
    for start in range(0, P, T):
        length = min(T, P - start)
        width = max(length, 2) if Pattern.parse(pattern) is Pattern.BM else length
        mask = generate_mask(pattern, N, width, ratio, rng, graph)
        pieces.append(mask.values[:, :length])
    return np.concatenate(pieces, axis=1).astype(bool)


@dataclass(frozen=True)
class MetricCell:
    mae: float
    rmse: float
    mape: float
    n: int
    excluded_mape: int = 0


def _missing(E) -> np.ndarray:
    values = E.values if isinstance(E, MaskMatrix) else np.asarray(E)
    return values == 0


def compute_metrics(X_true, X_pred, E) -> MetricCell:
    """MAE, RMSE and MAPE over the missing entries (``E == 0``) only.

    MAPE skips entries whose true magnitude is below ``MAPE_MIN_TRUTH``;
    the number skipped is reported.
    """
    X_true = np.asarray(X_true, dtype=np.float64)
    X_pred = np.asarray(X_pred, dtype=np.float64)
    missing = _missing(E)
    if not (X_true.shape == X_pred.shape == missing.shape):
        raise ValueError(f"shape mismatch: {X_true.shape}, {X_pred.shape}, {missing.shape}")
    n = int(missing.sum())
    if n == 0:
        raise ValueError("no missing entries to evaluate")
    truth, pred = X_true[missing], X_pred[missing]
    err = truth - pred
    usable = np.abs(truth) >= MAPE_MIN_TRUTH
    mape = float(np.mean(np.abs(err[usable] / truth[usable]))) if usable.any() else float("nan")
    return MetricCell(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mape=mape,
        n=n,
        excluded_mape=int((~usable).sum()),
    )


def baseline_mean_fill(X_masked, E) -> np.ndarray:
    """Fill each missing entry with its node's observed mean."""
    X = np.asarray(X_masked, dtype=np.float64)
    observed = ~_missing(E)
    counts = observed.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError(f"node {int(np.flatnonzero(counts == 0)[0])} has no observed entries")
    means = np.where(observed, X, 0.0).sum(axis=1) / counts
    return np.where(observed, X, means[:, None])


def baseline_historical_average(X_masked, E, period: int) -> np.ndarray:
    """Fill with the node's observed mean at the same time of day, else its overall mean."""
    X = np.asarray(X_masked, dtype=np.float64)
    observed = ~_missing(E)
    N, P = X.shape
    if P < period:
        raise ValueError(f"horizon of {P} steps is shorter than the period {period}")
    slot = np.arange(P) % period
    sums = np.zeros((N, period))
    counts = np.zeros((N, period))
    np.add.at(sums.T, slot, np.where(observed, X, 0.0).T)
    np.add.at(counts.T, slot, observed.T.astype(float))
    node_counts = observed.sum(axis=1)
    node_mean = np.divide(np.where(observed, X, 0.0).sum(axis=1), node_counts,
                          out=np.zeros(N), where=node_counts > 0)
    slot_mean = np.divide(sums, counts, out=np.repeat(node_mean[:, None], period, axis=1),
                          where=counts > 0)
    return np.where(observed, X, slot_mean[:, slot])


# --- reports ---------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    pattern: str
    ratio: float
    model: str
    mae: float
    rmse: float
    mape: float
    n: int
    excluded_mape: int


class MetricsReport:
    """Metric rows keyed by ``(pattern, ratio, model)``."""

    def __init__(self, rows: Sequence[ReportRow] = ()):
        self.rows = list(rows)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, MetricsReport) and self.rows == other.rows

    def get(self, pattern, ratio: float, model: str = "dstgcn") -> ReportRow:
        pattern = Pattern.parse(pattern).value
        for row in self.rows:
            if row.pattern == pattern and np.isclose(row.ratio, ratio) and row.model == model:
                return row
        raise KeyError((pattern, ratio, model))

    def models(self) -> list:
        return list(dict.fromkeys(r.model for r in self.rows))

    def cells(self) -> list:
        return list(dict.fromkeys((r.pattern, r.ratio) for r in self.rows))

    def write(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_HEADER)
            for row in self.rows:
                writer.writerow([repr(x) if isinstance(x, float) else x for x in astuple(row)])
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "MetricsReport":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != REPORT_HEADER:
                raise ValueError(f"{path}: expected header {','.join(REPORT_HEADER)}")
            rows = []
            for lineno, rec in enumerate(reader, 2):
                if len(rec) != len(REPORT_HEADER):
                    raise ValueError(f"{path}:{lineno}: expected {len(REPORT_HEADER)} fields")
                try:
                    kinds = [f.type for f in fields(ReportRow)]
                    values = [int(v) if k == "int" else float(v) if k == "float" else v
                              for v, k in zip(rec, kinds)]
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                rows.append(ReportRow(*values))
        return cls(rows)


def _cell_rows(pattern, ratio, X_true, model, graph, period, rng, baselines, plot_dir):
    T = model.window
    observed = horizon_mask(pattern, ratio, X_true.shape, T, rng, graph)
    X_masked = np.where(observed, X_true, 0.0)
    preds = {"dstgcn": sliding_impute(model, X_masked, T, observed)}
    if baselines:
        preds["mean_fill"] = baseline_mean_fill(X_masked, observed)
        if X_true.shape[1] >= period:
            preds["historical_average"] = baseline_historical_average(X_masked, observed, period)
    rows = []
    for name, pred in preds.items():
        cell = compute_metrics(X_true, pred, observed)
        rows.append(ReportRow(pattern.value, float(ratio), name, cell.mae, cell.rmse, cell.mape,
                              cell.n, cell.excluded_mape))
        if plot_dir is not None:
            missing = ~observed
            path = os.path.join(plot_dir, f"pairs_{pattern.value}_{ratio:g}_{name}.csv")
            np.savetxt(path, np.column_stack([X_true[missing], pred[missing]]), delimiter=",",
                       header="true,predicted", comments="", fmt="%.10g")
    return rows


def run_experiment(X_test, graph, model, patterns, ratios, seed: int, period: int = 288,
                   baselines: bool = True, jobs: int = 1, plot_dir=None) -> MetricsReport:
    """Mask the test horizon per (pattern, ratio), impute, and score every model.

    Each cell draws from its own generator seeded by ``(seed, pattern, ratio)``
    indices, so results do not depend on evaluation order or ``jobs``.
    """
    X_test = np.asarray(X_test, dtype=np.float64)
    patterns = [Pattern.parse(p) for p in patterns]
    for r in ratios:
        if not 0 < r < 1:
            raise ValueError(f"ratio {r} outside (0, 1)")
    tasks = [(p, r, np.random.default_rng([seed, pi, ri]))
             for pi, p in enumerate(patterns) for ri, r in enumerate(ratios)]

    def run(task):
        p, r, rng = task
        return _cell_rows(p, r, X_test, model, graph, period, rng, baselines, plot_dir)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    return MetricsReport([row for rows in results for row in rows])


def export_transition_weights(model, X_masked, node, times, node_ids=None, block: int = -1,
                              observed=None) -> list:
    """Forward/backward transition rows of one node at the requested window steps.

    Returns records ``(time, direction, weights)``. Rows come from the
    softmax-normalized dynamic transitions, or from the fixed transitions
    when the model has no structure-estimation layer.
    """
    if isinstance(node, (int, np.integer)):
        index = int(node)
        if not 0 <= index < model.config.num_nodes:
            raise KeyError(f"unknown node index {node}")
    else:
        ids = list(node_ids or [])
        if node not in ids:
            raise KeyError(f"unknown node {node!r}")
        index = ids.index(node)
    transitions = model.transitions(X_masked, observed)[block]
    records = []
    for t in times:
        if not 0 <= t < model.config.window:
            raise ValueError(f"time {t} outside the window")
        if transitions is None:
            fwd, bwd = model.fixed.forward[index], model.fixed.backward[index]
        else:
            fwd = transitions.forward[t, index].numpy()
            bwd = transitions.backward[t, index].numpy()
        records.append((int(t), "forward", np.asarray(fwd, dtype=np.float64)))
        records.append((int(t), "backward", np.asarray(bwd, dtype=np.float64)))
    return records


def write_transition_weights(records, path, node_ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "direction", *node_ids])
        for t, direction, weights in records:
            writer.writerow([t, direction, *(repr(float(w)) for w in weights)])
