"""Masked-sample generation, the reconstruction loss, Adam, and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from .graph import TrafficGraph, TransitionPair, compute_transitions
from .masking import MaskMatrix, Pattern, generate_mask
from .model import (
    DTYPE,
    ModelConfig,
    Normalizer,
    ParameterSet,
    forward_normalized,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    learning_rate: float = 1e-4
    batch_size: int = 4
    pattern: Pattern = Pattern.RM
    seed: int = 0
    # compute precision for training; checkpoints are always float64
    dtype: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    val_every: int = 100
    val_ratio: float = 0.4
    early_stop_patience: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern.parse(self.pattern))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``model`` holds the last finite state."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


def reconstruction_loss(X_true, X_pred, weight=None):
    """Sum of squared errors over all entries (optionally weighted by availability).

    Accepts torch tensors (differentiable) or array-likes (returns a float).
    """
    as_numpy = not isinstance(X_pred, torch.Tensor)
    X_true = torch.as_tensor(np.asarray(X_true) if as_numpy else X_true)
    X_pred = torch.as_tensor(np.asarray(X_pred)) if as_numpy else X_pred
    if X_true.shape != X_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(X_true.shape)} vs {tuple(X_pred.shape)}")
    X_true = X_true.to(X_pred.dtype)
    if not torch.isfinite(X_true).all() or not torch.isfinite(X_pred.detach()).all():
        raise ValueError("non-finite values in loss inputs")
    sq = (X_true - X_pred) ** 2
    if weight is not None:
        sq = sq * torch.as_tensor(weight, dtype=sq.dtype)
    loss = sq.sum()
    return float(loss) if as_numpy else loss


class Adam:
    """Adam with bias correction; moments live alongside the parameters."""

    def __init__(self, params: ParameterSet, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    @torch.no_grad()
    def step(self, params: ParameterSet, grads: dict, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))


@dataclass
class TrainingSample:
    x_masked: np.ndarray
    x_true: np.ndarray
    mask: MaskMatrix
    start: int
    ratio: float
    observed: np.ndarray  # mask and availability combined
    available: Optional[np.ndarray] = None


def sample_training_batch(X_hist, pattern, T: int, B: int, rng: np.random.Generator,
                          graph: Optional[TrafficGraph] = None, available=None) -> list:
    """One random window shared by ``B`` samples, each with its own ratio and mask.

    Ratios are drawn uniformly from ``(0, 1)``. Entries marked unavailable in
    ``available`` stay zero in the input whatever the mask says.
    """
    X_hist = np.asarray(X_hist, dtype=np.float64)
    N, P = X_hist.shape
    if P < T:
        raise ValueError(f"history has {P} steps, window needs {T}")
    start = int(rng.integers(0, P - T + 1))
    x_true = X_hist[:, start:start + T]
    avail = None if available is None else np.asarray(available, dtype=bool)[:, start:start + T]
    samples = []
    for _ in range(B):
        r = 0.0
        while r == 0.0:
            r = float(rng.random())
        mask = generate_mask(pattern, N, T, r, rng, graph)
        keep = mask.values.astype(bool) if avail is None else mask.values.astype(bool) & avail
        samples.append(TrainingSample(np.where(keep, x_true, 0.0), x_true, mask, start, r, keep, avail))
    return samples


def _as_transitions(graph) -> TransitionPair:
    return graph.transitions() if isinstance(graph, TrafficGraph) else graph


@dataclass
class TrainedModel:
    config: ModelConfig
    params: ParameterSet
    normalizer: Normalizer
    fixed: TransitionPair
    loss_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)  # (iteration, rmse)
    best_iteration: Optional[int] = None

    @property
    def window(self) -> int:
        return self.config.window

    def _normalized_input(self, X_masked, observed):
        X = np.asarray(X_masked, dtype=np.float64)
        observed = (X != 0) if observed is None else np.asarray(observed, dtype=bool)
        return torch.as_tensor(self.normalizer.normalize(X, observed), dtype=DTYPE)

    def predict(self, X_masked, observed=None, chunk: int = 16) -> np.ndarray:
        """Raw model output for ``(N, T)`` or ``(B, N, T)`` windows, in data units."""
        Z = self._normalized_input(X_masked, observed)
        squeeze = Z.dim() == 2
        if squeeze:
            Z = Z.unsqueeze(0)
        outs = []
        with torch.no_grad():
            for i in range(0, Z.shape[0], chunk):
                outs.append(forward_normalized(Z[i:i + chunk], self.fixed, self.params, self.config))
        out = self.normalizer.denormalize(torch.cat(outs).numpy())
        return out[0] if squeeze else out

    def transitions(self, X_masked, observed=None) -> list:
        """Per-block dynamic transitions for one ``(N, T)`` window (``None`` where not estimated)."""
        Z = self._normalized_input(X_masked, observed)
        with torch.no_grad():
            _, transitions = forward_normalized(Z, self.fixed, self.params, self.config, return_transitions=True)
        return transitions

    def save(self, path, extra: Optional[dict] = None) -> None:
        save_checkpoint(path, self.config, self.params, self.normalizer, extra)

    @classmethod
    def load(cls, path, graph) -> "TrainedModel":
        config, params, normalizer, _ = load_checkpoint(path)
        if normalizer is None:
            raise ValueError(f"{path}: checkpoint lacks normalization statistics")
        fixed = _as_transitions(graph)
        if fixed.forward.shape != (config.num_nodes, config.num_nodes):
            raise ValueError(f"graph has {fixed.forward.shape[0]} nodes, model expects {config.num_nodes}")
        return cls(config, params, normalizer, fixed)


def _snapshot(params: ParameterSet) -> ParameterSet:
    return ParameterSet((k, v.detach().to(DTYPE).clone()) for k, v in params.items())


def train(X_train, graph, model_config: ModelConfig, train_config: TrainConfig,
          available=None, X_val=None, val_available=None,
          on_iteration: Optional[Callable] = None) -> TrainedModel:
    """Fit the model with masked windows drawn from ``X_train`` (``N x P``).

    ``available`` marks genuinely observed training entries; unavailable
    entries are never fed to the network and never enter the loss. With
    ``X_val`` the parameters with the best validation RMSE (checked every
    ``val_every`` iterations) are returned.
    """
    from .evaluation import horizon_mask, sliding_impute, compute_metrics

    X_train = np.asarray(X_train, dtype=np.float64)
    if not np.all(np.isfinite(X_train)):
        raise ValueError("training data contains non-finite values")
    N, P = X_train.shape
    if N != model_config.num_nodes:
        raise ValueError(f"data has {N} nodes, model expects {model_config.num_nodes}")
    cfg = train_config
    dtype = _DTYPES[cfg.dtype]
    graph_for_masks = graph if isinstance(graph, TrafficGraph) else None
    fixed = _as_transitions(graph)
    fixed_t = (torch.as_tensor(fixed.forward, dtype=dtype), torch.as_tensor(fixed.backward, dtype=dtype))
    avail = None if available is None else np.asarray(available, dtype=bool)
    normalizer = Normalizer.fit(X_train, avail)

    params = ParameterSet((k, v.to(dtype)) for k, v in init_params(model_config, cfg.seed).items())
    params.requires_grad_(True)
    adam = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)

    val_mask = None
    if X_val is not None:
        X_val = np.asarray(X_val, dtype=np.float64)
        val_mask = horizon_mask(cfg.pattern, cfg.val_ratio, X_val.shape, model_config.window,
                                np.random.default_rng([cfg.seed, 1]), graph_for_masks)
        if val_available is not None:
            val_mask = val_mask & np.asarray(val_available, dtype=bool)

    result = TrainedModel(model_config, _snapshot(params), normalizer, fixed)
    last_finite = result.params
    best_rmse, stale = np.inf, 0
    lr = cfg.learning_rate
    for it in range(1, cfg.iterations + 1):
        batch = sample_training_batch(X_train, cfg.pattern, model_config.window, cfg.batch_size,
                                      rng, graph_for_masks, avail)
        z_in = np.stack([normalizer.normalize(s.x_masked, s.observed) for s in batch])
        weight = None
        if avail is not None:
            weight = torch.as_tensor(np.stack([s.available for s in batch]), dtype=dtype)
            z_true = np.stack([normalizer.normalize(s.x_true, s.available) for s in batch])
        else:
            z_true = np.stack([normalizer.normalize(s.x_true, 1.0) for s in batch])
        try:
            pred = forward_normalized(torch.as_tensor(z_in, dtype=dtype), fixed_t, params, model_config)
        except FloatingPointError as exc:
            result.params, result.best_iteration = last_finite, it - 1
            raise TrainingDiverged(f"iteration {it}: {exc}", result) from exc
        if not torch.isfinite(pred.detach()).all():
            result.params, result.best_iteration = last_finite, it - 1
            raise TrainingDiverged(f"non-finite output at iteration {it}", result)
        loss = reconstruction_loss(torch.as_tensor(z_true, dtype=dtype), pred, weight) / len(batch)
        loss_value = float(loss.detach())
        if not np.isfinite(loss_value):
            result.params, result.best_iteration = last_finite, it - 1
            raise TrainingDiverged(f"non-finite loss at iteration {it}", result)
        grads = torch.autograd.grad(loss, list(params.values()))
        grads = dict(zip(params.keys(), grads))
        bad = [k for k, g in grads.items() if not torch.isfinite(g).all()]
        if bad:
            result.params, result.best_iteration = last_finite, it - 1
            raise TrainingDiverged(f"non-finite gradient for {bad[0]} at iteration {it}", result)
        if cfg.grad_clip is not None:
            total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if total > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / float(total)) for k, g in grads.items()}
        if cfg.lr_decay_every and it > 1 and (it - 1) % cfg.lr_decay_every == 0:
            lr *= cfg.lr_decay
        adam.step(params, grads, lr)
        result.loss_history.append(loss_value)
        last_finite = _snapshot(params)

        val_rmse = None
        if val_mask is not None and (it % cfg.val_every == 0 or it == cfg.iterations):
            candidate = TrainedModel(model_config, _snapshot(params), normalizer, fixed)
            X_val_masked = np.where(val_mask, X_val, 0.0)
            recon = sliding_impute(candidate, X_val_masked, model_config.window, observed=val_mask)
            val_rmse = compute_metrics(X_val, recon, val_mask).rmse
            result.val_history.append((it, val_rmse))
            if val_rmse < best_rmse:
                best_rmse, stale = val_rmse, 0
                result.params, result.best_iteration = candidate.params, it
            else:
                stale += 1
            log.info("iteration %d loss %.4f val_rmse %.4f", it, loss_value, val_rmse)
        if on_iteration is not None:
            on_iteration(it, loss_value, val_rmse)
        if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            log.info("early stop at iteration %d", it)
            break

    if val_mask is None:
        result.params, result.best_iteration = _snapshot(params), len(result.loss_history)
    return result


# --- gradient verification -------------------------------------------------

def _tiny_problem(config: ModelConfig, seed: int):
    rng = np.random.default_rng(seed)
    N, T = config.num_nodes, config.window
    adjacency = (rng.random((N, N)) < 0.4) * rng.random((N, N))
    adjacency[-1, :] = 0.0  # one sink node exercises the self-loop rule
    fixed = compute_transitions(adjacency)
    x_true = rng.standard_normal((N, T))
    observed = rng.random((N, T)) >= 0.3
    z_in = torch.as_tensor(np.where(observed, x_true, 0.0))
    return fixed, z_in, torch.as_tensor(x_true)


class _ReluMargin(TorchFunctionMode):
    """Records the smallest ``|input|`` seen by any ReLU."""

    def __init__(self):
        super().__init__()
        self.margin = math.inf

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if func is torch.relu:
            self.margin = min(self.margin, float(args[0].detach().abs().min()))
        return func(*args, **(kwargs or {}))


def gradient_check(config: ModelConfig, eps: float = 1e-5, seed: int = 0, per_array: bool = False,
                   relu_margin: float = 1e-4, max_draws: int = 100):
    """Compare autograd gradients of the summed squared loss with central differences.

    Runs in float64. The relative error of an array is
    ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``; the
    maximum over arrays is returned (and the per-array dict when requested).

    Central differences are only meaningful where the loss is smooth over
    ``[p - eps, p + eps]``, so the random evaluation point is redrawn until
    every ReLU input is at least ``relu_margin`` away from the kink.
    """
    fixed, z_in, x_true = _tiny_problem(config, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    for _ in range(max_draws):
        params = init_params(config, seed)
        # nonzero biases so their gradients are exercised away from the init point
        for v in params.values():
            v.add_(0.1 * torch.randn(v.shape, generator=gen, dtype=DTYPE))
        with _ReluMargin() as probe, torch.no_grad():
            forward_normalized(z_in, fixed, params, config)
        if probe.margin >= relu_margin:
            break
    else:
        raise RuntimeError(f"no evaluation point with ReLU margin {relu_margin} in {max_draws} draws")
    params.requires_grad_(True)

    def loss_fn():
        return reconstruction_loss(x_true, forward_normalized(z_in, fixed, params, config))

    analytic = torch.autograd.grad(loss_fn(), list(params.values()))
    errors = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), analytic):
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
            scale = max(float(g.norm()), float(numeric.norm()))
            errors[name] = 0.0 if scale == 0 else float((g - numeric).norm()) / scale
    worst = max(errors.values())
    return (worst, errors) if per_array else worst
