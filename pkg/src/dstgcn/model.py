"""DSTGCN forward computation.

Every layer is a plain function of ``(inputs, params)``; ``params`` is a
:class:`ParameterSet` mapping dotted names to float64 tensors. Activations
are laid out ``(batch, time, node, feature)``.
"""
from __future__ import annotations

import io
import math
import os
import zipfile
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .graph import TrafficGraph, TransitionPair, chebyshev_basis

DTYPE = torch.float64
CHECKPOINT_FORMAT = 1
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    num_nodes: int
    window: int = 72
    blocks: int = 2
    diffusion_steps: int = 2
    hidden: int = 128
    out_dim: int = 64
    gse_hidden: int = 32
    # ablation switches; both on is the full model
    use_gse: bool = True
    use_dgcn: bool = True

    def __post_init__(self):
        for name in ("num_nodes", "window", "blocks", "diffusion_steps", "hidden", "out_dim", "gse_hidden"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    def to_record(self) -> dict:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_record(cls, record: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in record:
                continue
            raw = record[f.name]
            if f.type in ("bool", bool):
                if raw not in ("True", "False"):
                    raise ValueError(f"bad boolean for {f.name}: {raw!r}")
                kwargs[f.name] = raw == "True"
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


class ParameterSet(dict):
    """Ordered ``name -> tensor`` mapping holding every trainable array."""

    def clone(self) -> "ParameterSet":
        return ParameterSet((k, v.detach().clone()) for k, v in self.items())

    def requires_grad_(self, flag: bool = True) -> "ParameterSet":
        for v in self.values():
            v.requires_grad_(flag)
        return self

    def numpy(self) -> dict:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.items()}

    @classmethod
    def from_numpy(cls, arrays: dict) -> "ParameterSet":
        return cls((k, torch.tensor(np.asarray(v), dtype=DTYPE)) for k, v in arrays.items())

    def num_scalars(self) -> int:
        return sum(v.numel() for v in self.values())

    def equal(self, other: "ParameterSet") -> bool:
        return list(self) == list(other) and all(torch.equal(self[k], other[k]) for k in self)


def parameter_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every array of the model described by ``config``."""
    h, d, K, N = config.hidden, config.out_dim, config.diffusion_steps, config.num_nodes
    shapes = {}
    for s in range(config.blocks):
        p = f"block{s}"
        d_in = 1 if s == 0 else d
        for direction in ("fwd", "bwd"):
            shapes[f"{p}.lstm_{direction}.w_ih"] = (d_in, 4 * h)
            shapes[f"{p}.lstm_{direction}.w_hh"] = (h, 4 * h)
            shapes[f"{p}.lstm_{direction}.bias"] = (4 * h,)
        shapes[f"{p}.blstm_out.weight"] = (2 * h, d)
        shapes[f"{p}.blstm_out.bias"] = (d,)
        if config.use_dgcn:
            if config.use_gse:
                for direction in ("fwd", "bwd"):
                    shapes[f"{p}.gse_{direction}.w1"] = (d, config.gse_hidden)
                    shapes[f"{p}.gse_{direction}.b1"] = (config.gse_hidden,)
                    shapes[f"{p}.gse_{direction}.w2"] = (config.gse_hidden, N)
                    shapes[f"{p}.gse_{direction}.b2"] = (N,)
                    shapes[f"{p}.gate_{direction}.w_fixed"] = ()
                    shapes[f"{p}.gate_{direction}.w_est"] = ()
                    shapes[f"{p}.gate_{direction}.bias"] = ()
            shapes[f"{p}.dgcn.theta_fwd"] = (K, d, d)
            shapes[f"{p}.dgcn.theta_bwd"] = (K, d, d)
        else:
            shapes[f"{p}.linear.weight"] = (d, d)
            shapes[f"{p}.linear.bias"] = (d,)
        shapes[f"{p}.norm.scale"] = (d,)
        shapes[f"{p}.norm.shift"] = (d,)
    shapes["head.w1"] = (d, d)
    shapes["head.b1"] = (d,)
    shapes["head.w2"] = (d, 1)
    shapes["head.b2"] = (1,)
    return shapes


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "b1", "b2", "shift")


def _fan_in(shape: tuple) -> int:
    # weights multiply from the right (x @ W), so the fan-in is the second-to-last axis
    return shape[-2] if len(shape) >= 2 else 1


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norm scale 1."""
    gen = torch.Generator().manual_seed(int(seed))
    params = ParameterSet()
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm.scale"):
            params[name] = torch.ones(shape, dtype=DTYPE)
        elif _is_bias(name):
            params[name] = torch.zeros(shape, dtype=DTYPE)
        else:
            bound = 1.0 / math.sqrt(_fan_in(shape))
            u = torch.rand(shape, generator=gen, dtype=DTYPE)
            params[name] = (2.0 * u - 1.0) * bound
    return params


def check_params(params: ParameterSet, config: ModelConfig) -> None:
    expected = parameter_shapes(config)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {tuple(params[name].shape)} != expected {shape}")


# --- layers --------------------------------------------------------------

def _as_batch(M: torch.Tensor) -> tuple:
    if M.dim() == 3:
        return M.unsqueeze(0), True
    if M.dim() != 4:
        raise ValueError(f"expected (T, N, d) or (B, T, N, d), got shape {tuple(M.shape)}")
    return M, False



def blstm_forward(M: torch.Tensor, params: ParameterSet, prefix: str = "block0") -> torch.Tensor:
    """Bidirectional LSTM over time, shared across nodes, then a linear merge.

    ``M`` is ``(T, N, b)`` or ``(B, T, N, b)``; returns the same leading
    shape with ``d_o`` features.
    """
    M, squeeze = _as_batch(M)
    B, T, N, b = M.shape
    w_ih = torch.stack([params[f"{prefix}.lstm_fwd.w_ih"], params[f"{prefix}.lstm_bwd.w_ih"]])
    w_hh = torch.stack([params[f"{prefix}.lstm_fwd.w_hh"], params[f"{prefix}.lstm_bwd.w_hh"]])
    bias = torch.stack([params[f"{prefix}.lstm_fwd.bias"], params[f"{prefix}.lstm_bwd.bias"]])
    if w_ih.shape[1] != b:
        raise ValueError(f"{prefix}: input width {b} != recurrent input width {w_ih.shape[1]}")

    x = M.permute(1, 0, 2, 3).reshape(T, B * N, b)
    # input projections for both directions at once: (2, T, BN, 4h)
    gx = torch.matmul(x.unsqueeze(0), w_ih.unsqueeze(1)) + bias[:, None, None, :]
    # backward direction consumes time reversed, so step t drives both directions
    gx = torch.stack([gx[0], gx[1].flip(0)], dim=1)

    h_dim = w_hh.shape[1]
    h = M.new_zeros(2, B * N, h_dim)
    c = M.new_zeros(2, B * N, h_dim)
    outs = []
    # unbind rather than gx[t]: indexing in the loop makes backward allocate a full-size grad per step
    for gx_t in gx.unbind(0):
        g = torch.baddbmm(gx_t, h, w_hh)
        i, f, gg, o = g.split(h_dim, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(gg)
        h = torch.sigmoid(o) * torch.tanh(c)
        outs.append(h)
    H = torch.stack(outs)  # (T, 2, BN, h)
    merged = torch.cat([H[:, 0], H[:, 1].flip(0)], dim=-1)
    out = merged @ params[f"{prefix}.blstm_out.weight"] + params[f"{prefix}.blstm_out.bias"]
    out = out.reshape(T, B, N, -1).permute(1, 0, 2, 3)
    return out[0] if squeeze else out


@dataclass
class DynamicTransitions:
    """Per-slot transition matrices from the structure-estimation layer.

    ``forward``/``backward`` are row-normalized and have shape
    ``(..., T, N, N)``. The gate, candidate and pre-normalization fused
    matrices are kept for inspection.
    """

    forward: torch.Tensor
    backward: torch.Tensor
    gate_forward: Optional[torch.Tensor] = None
    gate_backward: Optional[torch.Tensor] = None
    candidate_forward: Optional[torch.Tensor] = None
    candidate_backward: Optional[torch.Tensor] = None
    fused_forward: Optional[torch.Tensor] = None
    fused_backward: Optional[torch.Tensor] = None

    def item(self, b: int) -> "DynamicTransitions":
        """The transitions of batch element ``b``."""
        return DynamicTransitions(**{f.name: None if getattr(self, f.name) is None else getattr(self, f.name)[b]
                                     for f in fields(self)})


def _fixed_tensors(fixed, dtype=DTYPE) -> tuple:
    if isinstance(fixed, TransitionPair):
        fixed = (fixed.forward, fixed.backward)
    A_f, A_b = fixed
    return torch.as_tensor(A_f, dtype=dtype), torch.as_tensor(A_b, dtype=dtype)


def _estimate(Mp, A_fixed, params, prefix, direction):
    p = f"{prefix}.gse_{direction}"
    hidden = torch.relu(Mp @ params[f"{p}.w1"] + params[f"{p}.b1"])
    candidate = hidden @ params[f"{p}.w2"] + params[f"{p}.b2"]  # row i comes from node i
    g = f"{prefix}.gate_{direction}"
    gate = torch.sigmoid(params[f"{g}.w_fixed"] * A_fixed + params[f"{g}.w_est"] * candidate + params[f"{g}.bias"])
    fused = gate * A_fixed + (1.0 - gate) * candidate
    return candidate, gate, fused


def gse_forward(Mp: torch.Tensor, fixed, params: ParameterSet, prefix: str = "block0") -> DynamicTransitions:
    """Gate the fixed transitions against feature-derived candidates, per time slot.

    ``Mp`` is ``(..., T, N, d_o)``; the feed-forward estimators are shared
    over time slots. Fused rows are softmax-normalized.
    """
    A_f, A_b = _fixed_tensors(fixed, Mp.dtype)
    N = Mp.shape[-2]
    if A_f.shape != (N, N):
        raise ValueError(f"fixed transitions are {tuple(A_f.shape)}, features have {N} nodes")
    cand_f, gate_f, fused_f = _estimate(Mp, A_f, params, prefix, "fwd")
    cand_b, gate_b, fused_b = _estimate(Mp, A_b, params, prefix, "bwd")
    if not (torch.isfinite(fused_f).all() and torch.isfinite(fused_b).all()):
        raise FloatingPointError(f"{prefix}: non-finite estimated transition matrix")
    return DynamicTransitions(
        forward=torch.softmax(fused_f, dim=-1),
        backward=torch.softmax(fused_b, dim=-1),
        gate_forward=gate_f,
        gate_backward=gate_b,
        candidate_forward=cand_f,
        candidate_backward=cand_b,
        fused_forward=fused_f,
        fused_backward=fused_b,
    )


def dgcn_forward(Mp: torch.Tensor, A_f: torch.Tensor, A_b: torch.Tensor,
                 theta_f: torch.Tensor, theta_b: torch.Tensor, K: int) -> torch.Tensor:
    """``sum_{k=1..K} F_k(A_f) Mp theta_f[k-1] + F_k(A_b) Mp theta_b[k-1]``.

    ``Mp`` is ``(..., N, d)``; ``A_f``/``A_b`` broadcast against its leading
    dimensions, so one pair of fixed matrices or one pair per slot both work.
    """
    if theta_f.shape[0] != K or theta_b.shape[0] != K:
        raise ValueError(f"expected {K} diffusion coefficient matrices, got {theta_f.shape[0]}/{theta_b.shape[0]}")
    N, d = Mp.shape[-2:]
    if A_f.shape[-1] != N or A_b.shape[-1] != N:
        raise ValueError(f"transition size {A_f.shape[-1]} != node count {N}")
    if theta_f.shape[1] != d:
        raise ValueError(f"feature width {d} != coefficient width {theta_f.shape[1]}")
    basis_f = chebyshev_basis(A_f, K)
    basis_b = chebyshev_basis(A_b, K)
    out = 0
    for k in range(1, K + 1):
        out = out + (basis_f[k] @ Mp) @ theta_f[k - 1] + (basis_b[k] @ Mp) @ theta_b[k - 1]
    return out


def st_block_forward(M_in: torch.Tensor, fixed, params: ParameterSet, config: ModelConfig,
                     block: int = 0, return_transitions: bool = False):
    """BLSTM -> structure estimation -> diffusion convolution -> residual + layer norm."""
    p = f"block{block}"
    m_blstm = blstm_forward(M_in, params, p)
    transitions = None
    if config.use_dgcn:
        if config.use_gse:
            transitions = gse_forward(m_blstm, fixed, params, p)
            A_f, A_b = transitions.forward, transitions.backward
        else:
            A_f, A_b = _fixed_tensors(fixed, m_blstm.dtype)
        m_dgcn = dgcn_forward(m_blstm, A_f, A_b, params[f"{p}.dgcn.theta_fwd"],
                              params[f"{p}.dgcn.theta_bwd"], config.diffusion_steps)
    else:
        m_dgcn = m_blstm @ params[f"{p}.linear.weight"] + params[f"{p}.linear.bias"]
    out = F.layer_norm(m_dgcn + m_blstm, (config.out_dim,), params[f"{p}.norm.scale"],
                       params[f"{p}.norm.shift"], eps=LAYER_NORM_EPS)
    if return_transitions:
        return out, transitions
    return out


def output_head(M_last: torch.Tensor, params: ParameterSet) -> torch.Tensor:
    hidden = torch.relu(M_last @ params["head.w1"] + params["head.b1"])
    return hidden @ params["head.w2"] + params["head.b2"]


def forward_normalized(Z: torch.Tensor, fixed, params: ParameterSet, config: ModelConfig,
                       return_transitions: bool = False):
    """Run the network on already-normalized, zero-masked input.

    ``Z`` is ``(N, T)`` or ``(B, N, T)``; the output has the same shape.
    """
    squeeze = Z.dim() == 2
    if squeeze:
        Z = Z.unsqueeze(0)
    if Z.shape[1:] != (config.num_nodes, config.window):
        raise ValueError(f"input is {tuple(Z.shape[1:])}, model expects "
                         f"({config.num_nodes}, {config.window})")
    M = Z.transpose(1, 2).unsqueeze(-1)  # (B, T, N, 1)
    all_transitions = []
    for s in range(config.blocks):
        M, transitions = st_block_forward(M, fixed, params, config, s, return_transitions=True)
        all_transitions.append(transitions)
    out = output_head(M, params).squeeze(-1).transpose(1, 2)
    if squeeze:
        out = out[0]
        all_transitions = [None if t is None else t.item(0) for t in all_transitions]
    if return_transitions:
        return out, all_transitions
    return out


@dataclass(frozen=True)
class Normalizer:
    """z-score statistics of the observed training entries."""

    mean: float
    std: float

    @classmethod
    def fit(cls, X: np.ndarray, available: Optional[np.ndarray] = None) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        available = (X != 0) if available is None else np.asarray(available, dtype=bool)
        observed = X[available]
        if observed.size == 0:
            raise ValueError("no observed entries to fit normalization")
        std = float(observed.std())
        return cls(float(observed.mean()), std if std > 0 else 1.0)

    def normalize(self, X, observed):
        return (X - self.mean) / self.std * observed

    def denormalize(self, Z):
        return Z * self.std + self.mean


def dstgcn_forward(X_masked, graph, config: ModelConfig, params: ParameterSet,
                   normalizer: Normalizer, observed=None) -> np.ndarray:
    """Reconstruct an ``N x T`` window (or a ``B x N x T`` stack).

    Zeros in ``X_masked`` are treated as missing unless an explicit
    ``observed`` mask is given.
    """
    X = np.asarray(X_masked, dtype=np.float64)
    observed = (X != 0) if observed is None else np.asarray(observed, dtype=bool)
    if X.shape[-2:] != (config.num_nodes, config.window):
        raise ValueError(f"input window is {X.shape[-2:]}, model expects "
                         f"({config.num_nodes}, {config.window})")
    fixed = graph.transitions() if isinstance(graph, TrafficGraph) else graph
    Z = torch.as_tensor(normalizer.normalize(X, observed), dtype=DTYPE)
    with torch.no_grad():
        out = forward_normalized(Z, fixed, params, config)
    return normalizer.denormalize(out.numpy())


# --- checkpoints ---------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, params: ParameterSet,
                    normalizer: Optional[Normalizer] = None, extra: Optional[dict] = None) -> None:
    """Write a zip archive: ``manifest.txt`` plus one ``.npy`` record per array."""
    manifest = {"format_version": str(CHECKPOINT_FORMAT), **config.to_record()}
    if normalizer is not None:
        manifest["norm_mean"] = repr(normalizer.mean)
        manifest["norm_std"] = repr(normalizer.std)
    for k, v in (extra or {}).items():
        manifest[k] = str(v)
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.txt", "".join(f"{k} = {v}\n" for k, v in manifest.items()))
        for name, array in params.numpy().items():
            buf = io.BytesIO()
            np.save(buf, np.asarray(array, dtype="<f8"), allow_pickle=False)
            zf.writestr(f"params/{name}.npy", buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple:
    """Return ``(config, params, normalizer_or_None, manifest)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = {}
        for line in zf.read("manifest.txt").decode("utf-8").splitlines():
            if line.strip():
                key, _, value = line.partition(" = ")
                manifest[key.strip()] = value.strip()
        if manifest.get("format_version") != str(CHECKPOINT_FORMAT):
            raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
        config = ModelConfig.from_record(manifest)
        arrays = {}
        for name in parameter_shapes(config):
            with zf.open(f"params/{name}.npy") as fh:
                arrays[name] = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    params = ParameterSet.from_numpy(arrays)
    check_params(params, config)
    normalizer = None
    if "norm_mean" in manifest:
        normalizer = Normalizer(float(manifest["norm_mean"]), float(manifest["norm_std"]))
    return config, params, normalizer, manifest
