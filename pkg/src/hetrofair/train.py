"""BPR training with uniform negative sampling and early stopping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import evaluation
from .data import DatasetSplit, InteractionGraph
from .model import ModelParams, backward_embedding, fair_embedding_generation

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    reg_beta: float = 1e-4
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 15
    seed: int = 0
    eval_every: int = 1
    optimizer: str = "adam"
    n: int = 20

    def validate(self) -> list[str]:
        errors = []
        if not self.learning_rate >= 0:
            errors.append("learning_rate must be >= 0")
        if not self.reg_beta >= 0:
            errors.append("reg_beta must be >= 0")
        for name in ("batch_size", "max_epochs", "patience", "eval_every", "n"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            errors.append(f"unknown optimizer {self.optimizer!r}")
        return errors


@dataclass
class GradientSet:
    dX: np.ndarray
    dW: np.ndarray


def _train_codes(graph: InteractionGraph) -> np.ndarray:
    return graph.edge_users * graph.num_items + graph.edge_items  # sorted, since edges are


def sample_negatives(graph: InteractionGraph, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform negatives per user, resampling any item the user trained on."""
    users = np.asarray(users, dtype=np.int64)
    full = users[graph.user_degree[users] >= graph.num_items]
    if full.size:
        raise TrainingError(f"user {int(full[0])} interacted with every item; no negative exists")
    codes = _train_codes(graph)
    neg = rng.integers(0, graph.num_items, size=users.size)
    bad = np.isin(users * graph.num_items + neg, codes, assume_unique=False)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, graph.num_items, size=idx.size)
        bad[idx] = np.isin(users[idx] * graph.num_items + neg[idx], codes)
    return neg


def iter_batches(split_or_graph, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch: shuffled train edges cut into batches of (u, i, j) rows."""
    graph = split_or_graph.train_graph if isinstance(split_or_graph, DatasetSplit) else split_or_graph
    order = rng.permutation(graph.num_edges)
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        u = graph.edge_users[idx]
        i = graph.edge_items[idx]
        j = sample_negatives(graph, u, rng)
        yield np.stack([u, i, j], axis=1)


def sample_batch(split_or_graph, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return next(iter_batches(split_or_graph, batch_size, rng))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _pair_margin(Z: np.ndarray, nu: int, triples: np.ndarray) -> np.ndarray:
    u, i, j = triples[:, 0], nu + triples[:, 1], nu + triples[:, 2]
    return np.einsum("bd,bd->b", Z[u], Z[i] - Z[j])


def regularizer(params: ModelParams) -> float:
    return float(np.sum(params.X ** 2) + np.sum(params.W ** 2))


def bpr_loss(params: ModelParams, graph: InteractionGraph, triples, beta: float = 0.0) -> float:
    """Sum of -ln sigmoid(y_ui - y_uj) over triples plus beta * ||Theta||^2."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    Z, _ = fair_embedding_generation(graph, params)
    x = _pair_margin(Z, graph.num_users, triples)
    return float(np.sum(_softplus(-x))) + beta * regularizer(params)


def loss_and_grad(params: ModelParams, graph: InteractionGraph, triples, beta: float = 0.0):
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    nu = graph.num_users
    Z, layers = fair_embedding_generation(graph, params)
    x = _pair_margin(Z, nu, triples)
    loss = float(np.sum(_softplus(-x))) + beta * regularizer(params)

    g = -_sigmoid(-x)[:, None]  # d(-ln sigmoid(x))/dx
    u, i, j = triples[:, 0], nu + triples[:, 1], nu + triples[:, 2]
    dZ = np.zeros_like(Z)
    np.add.at(dZ, u, g * (Z[i] - Z[j]))
    np.add.at(dZ, i, g * Z[u])
    np.add.at(dZ, j, -g * Z[u])
    dX, dW = backward_embedding(graph, params, layers, dZ)
    dX = dX + 2.0 * beta * params.X
    dW = dW + 2.0 * beta * params.W
    return loss, GradientSet(dX, dW)


def grad(params: ModelParams, graph: InteractionGraph, triples, beta: float = 0.0) -> GradientSet:
    return loss_and_grad(params, graph, triples, beta)[1]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: GradientSet) -> None:
        self.t += 1
        for name, g in (("X", grads.dX), ("W", grads.dW)):
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p = getattr(params, name)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: GradientSet) -> None:
        params.X -= self.lr * grads.dX
        params.W -= self.lr * grads.dW


def make_optimizer(config: TrainConfig):
    return Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)


def fit(
    graph: InteractionGraph,
    split: DatasetSplit,
    params: ModelParams,
    config: TrainConfig,
    *,
    rng: np.random.Generator | None = None,
    metric_fn: Callable[[ModelParams], float] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    on_best: Callable[[ModelParams, dict], None] | None = None,
    frozen_w: bool = False,
):
    """Train ``params`` on ``graph`` and return (best params, per-epoch log).

    ``metric_fn`` overrides the validation metric (validation NDCG@N by
    default). ``frozen_w`` keeps the per-layer weights fixed.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if metric_fn is None:
        def metric_fn(p):
            Z, _ = fair_embedding_generation(graph, p)
            return evaluation.validation_ndcg(Z, split, config.n)

    params = params.copy()
    opt = make_optimizer(config)
    best, best_metric, stale = params.copy(), -math.inf, 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for triples in iter_batches(graph, config.batch_size, rng):
            loss, grads = loss_and_grad(params, graph, triples, config.reg_beta)
            if not math.isfinite(loss) or not (np.all(np.isfinite(grads.dX)) and np.all(np.isfinite(grads.dW))):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch} (loss={loss})")
            if frozen_w:
                grads.dW[:] = 0.0
            opt.step(params, grads)
            total += loss
        if not (np.all(np.isfinite(params.X)) and np.all(np.isfinite(params.W))):
            raise TrainingError(f"non-finite parameters after epoch {epoch}")
        entry = {"epoch": epoch, "loss": total, "val_ndcg": float("nan")}
        improved = False
        if epoch % config.eval_every == 0:
            metric = metric_fn(params)
            entry["val_ndcg"] = metric
            if metric > best_metric:
                best, best_metric, stale, improved = params.copy(), metric, 0, True
            else:
                stale += 1
        entry["elapsed_ms"] = int(round((time.perf_counter() - t0) * 1000))
        history.append(entry)
        log.info(format_epoch(entry))
        if on_epoch:
            on_epoch(entry)
        if improved and on_best:
            on_best(best, entry)
        if stale >= config.patience:
            break
    if best_metric == -math.inf:
        best = params
    return best, history


def format_epoch(entry: dict) -> str:
    return (f"epoch={entry['epoch']} loss={entry['loss']:.6f} "
            f"val_ndcg@20={entry['val_ndcg']:.6f} elapsed_ms={entry['elapsed_ms']}")
