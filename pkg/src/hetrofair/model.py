"""Embedding propagation over the user-item graph.

Three modes share one parameter layout:

* ``lightgcn``: plain degree-normalized neighbor sums.
* ``fair_attention``: each message is divided by ``delta * sigmoid(h_u . h_i)``.
* ``hetrofair``: each message is divided elementwise by
  ``delta * sigmoid((h_u . h_i) * W_k)``, a per-feature weight vector.

The final representation averages all K + 1 layers. The backward pass is
written out by hand so gradients flow through the attention weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import InteractionGraph

MODES = ("lightgcn", "fair_attention", "hetrofair")
INIT_SCHEMES = ("xavier", "zeros", "normal")
EPS = 1e-8
MAGIC = b"HFR1"


@dataclass
class ModelParams:
    X: np.ndarray
    W: np.ndarray  # (K, d); row k-1 holds layer k
    delta: float = 1.0
    mode: str = "hetrofair"
    norm_exponent: float = 0.5

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64).reshape(-1, self.X.shape[1])
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.W.shape[0] < 1:
            raise ValueError("K must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.X.copy(), self.W.copy(), self.delta, self.mode, self.norm_exponent)


@dataclass
class EmbeddingLayers:
    H: list[np.ndarray]
    edge_weights: list[np.ndarray] = field(default_factory=list)
    # per-layer edge dot products and sigmoid values, kept for backprop
    edge_scores: list[np.ndarray] = field(default_factory=list, repr=False)
    edge_sigmoid: list[np.ndarray] = field(default_factory=list, repr=False)


def xavier_init(rows: int, cols: int, seed) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    bound = np.sqrt(6.0 / (rows + cols))
    return np.random.default_rng(seed).uniform(-bound, bound, size=(rows, cols))


def alt_init(rows: int, cols: int, scheme: str, seed=None) -> np.ndarray:
    if scheme == "zeros":
        return np.zeros((rows, cols))
    if scheme == "normal":
        return np.random.default_rng(seed).normal(0.0, 0.01, size=(rows, cols))
    if scheme == "xavier":
        return xavier_init(rows, cols, seed)
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_params(
    num_nodes: int,
    d: int,
    K: int,
    *,
    mode: str = "hetrofair",
    delta: float = 1.0,
    norm_exponent: float = 0.5,
    init: str = "xavier",
    w_init: str = "xavier",
    seed=0,
) -> ModelParams:
    """Initialize X (num_nodes x d) and one 1 x d weight row per layer."""
    if K < 1:
        raise ValueError("K must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    x_seed, *w_seeds = ss.spawn(K + 1)
    X = alt_init(num_nodes, d, init, x_seed)
    W = np.vstack([alt_init(1, d, w_init, s) for s in w_seeds])
    return ModelParams(X, W, delta, mode, norm_exponent)


class _EdgeOps:
    """Edge endpoints, normalization coefficients and scatter operators."""

    def __init__(self, graph: InteractionGraph, exponent: float):
        deg = graph.node_degree.astype(np.float64)
        if np.any(deg == 0):
            bad = int(np.flatnonzero(deg == 0)[0])
            raise ValueError(f"node {bad} has zero degree; propagation needs degree >= 1")
        n, m = graph.num_nodes, graph.num_edges
        self.a = graph.edge_users
        self.b = graph.edge_items + graph.num_users
        self.coef = deg[self.a] ** -exponent * deg[self.b] ** -exponent
        cols = np.arange(m)
        ones = np.ones(m)
        self.scatter_a = sp.csr_matrix((ones, (self.a, cols)), shape=(n, m))
        self.scatter_b = sp.csr_matrix((ones, (self.b, cols)), shape=(n, m))
        rows = np.concatenate([self.a, self.b])
        colsn = np.concatenate([self.b, self.a])
        self.norm_adj = sp.csr_matrix((np.tile(self.coef, 2), (rows, colsn)), shape=(n, n))
        self.norm_adj.sort_indices()


@lru_cache(maxsize=8)
def _edge_ops(graph: InteractionGraph, exponent: float) -> _EdgeOps:
    return _EdgeOps(graph, exponent)


def _check_rows(graph: InteractionGraph, H: np.ndarray) -> None:
    if H.shape[0] != graph.num_nodes:
        raise ValueError(f"embedding has {H.shape[0]} rows, graph has {graph.num_nodes} nodes")


def propagate_baseline(graph: InteractionGraph, H_prev: np.ndarray, norm_exponent: float = 0.5) -> np.ndarray:
    _check_rows(graph, H_prev)
    return np.asarray(_edge_ops(graph, float(norm_exponent)).norm_adj @ H_prev)


def edge_attention(h_u, h_i, W_k, delta: float, mode: str, sigmoid=expit) -> np.ndarray:
    """Attention weight vector for one edge (or a stack of edges along axis 0)."""
    h_u = np.asarray(h_u, dtype=np.float64)
    h_i = np.asarray(h_i, dtype=np.float64)
    s = np.sum(h_u * h_i, axis=-1)
    if mode == "hetrofair":
        return delta * sigmoid(np.multiply.outer(s, np.asarray(W_k, dtype=np.float64)))
    if mode == "fair_attention":
        return delta * np.broadcast_to(sigmoid(s)[..., None], h_u.shape).copy()
    raise ValueError(f"edge attention undefined for mode {mode!r}")


def _fair_layer(ops: _EdgeOps, H: np.ndarray, W_k: np.ndarray, delta: float, mode: str, sigmoid):
    Ha, Hb = H[ops.a], H[ops.b]
    s = np.einsum("ed,ed->e", Ha, Hb)
    if mode == "hetrofair":
        sig = sigmoid(s[:, None] * W_k[None, :])
    else:
        sig = np.broadcast_to(sigmoid(s)[:, None], Ha.shape)
    w = delta * sig
    g = np.maximum(w, EPS)
    scale = ops.coef[:, None] / g
    out = ops.scatter_a @ (scale * Hb) + ops.scatter_b @ (scale * Ha)
    return np.asarray(out), s, sig, w


def propagate_fair(
    graph: InteractionGraph,
    H_prev: np.ndarray,
    W_k: np.ndarray,
    delta: float,
    mode: str = "hetrofair",
    norm_exponent: float = 0.5,
    sigmoid=expit,
):
    """One attention-weighted layer; returns (H_next, per-edge weights (m, d))."""
    _check_rows(graph, H_prev)
    if mode not in ("fair_attention", "hetrofair"):
        raise ValueError(f"propagate_fair does not handle mode {mode!r}")
    ops = _edge_ops(graph, float(norm_exponent))
    out, _, _, w = _fair_layer(ops, np.asarray(H_prev, dtype=np.float64),
                               np.asarray(W_k, dtype=np.float64).ravel(), delta, mode, sigmoid)
    return out, w


def fair_embedding_generation(graph: InteractionGraph, params: ModelParams, sigmoid=expit):
    """Run K propagation layers and average them into the final embeddings Z."""
    _check_rows(graph, params.X)
    ops = _edge_ops(graph, float(params.norm_exponent))
    layers = EmbeddingLayers(H=[params.X])
    H = params.X
    for k in range(params.K):
        if params.mode == "lightgcn":
            H = np.asarray(ops.norm_adj @ H)
        else:
            H, s, sig, w = _fair_layer(ops, H, params.W[k], params.delta, params.mode, sigmoid)
            layers.edge_scores.append(s)
            layers.edge_sigmoid.append(sig)
            layers.edge_weights.append(w)
        layers.H.append(H)
    Z = sum(layers.H) / (params.K + 1)
    return Z, layers


def backward_embedding(
    graph: InteractionGraph, params: ModelParams, layers: EmbeddingLayers, dZ: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull dL/dZ back to (dL/dX, dL/dW) through every layer."""
    ops = _edge_ops(graph, float(params.norm_exponent))
    K = params.K
    dW = np.zeros_like(params.W)
    G = dZ / (K + 1)  # gradient reaching H^(K)
    for k in range(K, 0, -1):
        H = layers.H[k - 1]
        if params.mode == "lightgcn":
            dH = np.asarray(ops.norm_adj @ G)
        else:
            dH, dW[k - 1] = _fair_layer_backward(ops, params, H, layers, k - 1, G)
        G = dZ / (K + 1) + dH
    return G, dW


def _fair_layer_backward(ops: _EdgeOps, params: ModelParams, H, layers: EmbeddingLayers, idx: int, G):
    delta = params.delta
    s, sig, w = layers.edge_scores[idx], layers.edge_sigmoid[idx], layers.edge_weights[idx]
    Ha, Hb = H[ops.a], H[ops.b]
    Ga, Gb = G[ops.a], G[ops.b]
    g = np.maximum(w, EPS)
    scale = ops.coef[:, None] / g
    dH = ops.scatter_b @ (scale * Ga) + ops.scatter_a @ (scale * Gb)
    # d out / d g for both directions of the edge
    dg = -scale / g * (Ga * Hb + Gb * Ha)
    dw = np.where(w > EPS, dg, 0.0)
    dz = dw * delta * sig * (1.0 - sig)
    if params.mode == "hetrofair":
        W_k = params.W[idx]
        dW_k = dz.T @ s
        ds = dz @ W_k
    else:
        dW_k = np.zeros(params.d)
        ds = dz.sum(axis=1)
    dH = dH + ops.scatter_a @ (ds[:, None] * Hb) + ops.scatter_b @ (ds[:, None] * Ha)
    return np.asarray(dH), dW_k


def score(Z: np.ndarray, num_users: int, u: int, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    num_items = Z.shape[0] - num_users
    if not 0 <= u < num_users:
        raise IndexError(f"user index {u} out of range")
    if items.size and (items.min() < 0 or items.max() >= num_items):
        raise IndexError("item index out of range")
    return Z[num_users + items] @ Z[u]


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    rows, d = params.X.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", rows, d, params.K))
        fh.write(params.X.astype("<f8").tobytes())
        fh.write(params.W.astype("<f8").tobytes())
        fh.write(struct.pack("<d", params.delta))
        fh.write(struct.pack("<B", MODES.index(params.mode)))
        fh.write(struct.pack("<d", params.norm_exponent))


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated checkpoint")
    rows, d, K = struct.unpack_from("<III", raw, 4)
    expected = 16 + 8 * (rows * d + K * d) + 8 + 1 + 8
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated or oversized checkpoint ({len(raw)} bytes, expected {expected})")
    off = 16
    X = np.frombuffer(raw, dtype="<f8", count=rows * d, offset=off).reshape(rows, d).astype(np.float64)
    off += 8 * rows * d
    W = np.frombuffer(raw, dtype="<f8", count=K * d, offset=off).reshape(K, d).astype(np.float64)
    off += 8 * K * d
    (delta,) = struct.unpack_from("<d", raw, off)
    (tag,) = struct.unpack_from("<B", raw, off + 8)
    (norm_exponent,) = struct.unpack_from("<d", raw, off + 9)
    if tag >= len(MODES):
        raise ValueError(f"{path}: unknown mode tag {tag}")
    return ModelParams(X, W, delta, MODES[tag], norm_exponent)
