"""Dense checks of how normalized propagation converges and what it does to degree.

With a self-loop on every node, powers of D~^-1/2 A~ D~^-1/2 on a connected
graph approach the rank-one matrix sqrt((d_i+1)(d_j+1)) / (2|E| + |V|). The
consequence for embeddings is that, after many layers, embedding norms and
dot-product scores are ordered by node degree. The helpers here measure both
on small graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .evaluation import UndefinedMetric, spearman

MAX_NODES = 200


@dataclass(frozen=True, eq=False)
class LoopedGraph:
    """Undirected connected graph. ``adjacency`` has no diagonal entries;
    ``self_loops`` says whether propagation adds the identity.

    ``num_users`` optionally marks the first nodes as users and the rest as
    items; without it every node plays both roles in the degree-ordering checks.
    """

    adjacency: np.ndarray
    self_loops: bool = True
    num_users: int | None = None

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("adjacency must be square")
        if A.shape[0] > MAX_NODES:
            raise ValueError(f"dense theory checks are capped at {MAX_NODES} nodes")
        if not np.array_equal(A, A.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(A) != 0):
            raise ValueError("adjacency must not contain self loops; use self_loops=True")
        ncomp, _ = connected_components(A, directed=False)
        if ncomp != 1:
            raise ValueError("graph is disconnected")
        object.__setattr__(self, "adjacency", A)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum() // 2)

    def normalized(self) -> np.ndarray:
        A = self.adjacency + np.eye(self.n) if self.self_loops else self.adjacency
        s = 1.0 / np.sqrt(A.sum(axis=1))
        return s[:, None] * A * s[None, :]

    def groups(self) -> tuple[np.ndarray, np.ndarray]:
        if self.num_users is None:
            idx = np.arange(self.n)
            return idx, idx
        return np.arange(self.num_users), np.arange(self.num_users, self.n)


@dataclass
class ConvergenceTrace:
    k: int
    max_abs_error: float
    limit: np.ndarray = field(repr=False)
    passed: bool
    tol: float
    errors: dict[int, float] = field(default_factory=dict)


@dataclass
class DegreeOrderReport:
    k: int
    user_norm_src: float
    item_norm_src: float
    score_src: float
    norm_score_src: float
    hub_item: int | None = None
    hub_dominates: bool | None = None

    @property
    def values(self) -> dict[str, float]:
        return {
            "user_norm_src": self.user_norm_src,
            "item_norm_src": self.item_norm_src,
            "score_src": self.score_src,
            "norm_score_src": self.norm_score_src,
        }

    def passed(self, tol: float = 1e-12) -> bool:
        vals = [v for v in self.values.values() if not np.isnan(v)]
        return bool(vals) and all(v >= 1.0 - tol for v in vals)


def limit_matrix(graph: LoopedGraph) -> np.ndarray:
    d1 = graph.degrees + 1.0
    return np.sqrt(np.outer(d1, d1)) / (2 * graph.num_edges + graph.n)


def power_iterate(graph: LoopedGraph, k: int) -> np.ndarray:
    if k < 0:
        raise ValueError("k must be >= 0")
    N = graph.normalized()
    P = np.eye(graph.n)
    for _ in range(k):
        P = N @ P
    return P


def error_trace(graph: LoopedGraph, ks) -> dict[int, float]:
    """Sup-norm distance to the limit for each requested power, in one sweep."""
    ks = sorted(set(int(k) for k in ks))
    N = graph.normalized()
    L = limit_matrix(graph)
    P = np.eye(graph.n)
    out, done = {}, 0
    for k in ks:
        for _ in range(k - done):
            P = N @ P
        done = k
        out[k] = float(np.max(np.abs(P - L)))
    return out


def verify_convergence(graph: LoopedGraph, k: int, tol: float, ks=None) -> ConvergenceTrace:
    if tol <= 0:
        raise ValueError("tol must be > 0")
    errors = error_trace(graph, set(ks or ()) | {k})
    err = errors[k]
    return ConvergenceTrace(k, err, limit_matrix(graph), err <= tol, tol, errors)


def _distinct(values: np.ndarray) -> np.ndarray:
    """Mask of entries whose value occurs exactly once."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    return counts[inverse] == 1


def _src(x, y) -> float:
    try:
        return spearman(x, y)
    except UndefinedMetric:
        return float("nan")


def verify_degree_ordering(graph: LoopedGraph, k: int, seed=0, d: int = 8, H0: np.ndarray | None = None) -> DegreeOrderReport:
    """Degree ordering of embedding norms and scores after k propagation steps.

    Nodes that share a degree with another node of their group are left out
    of each correlation. The score check uses every user and keeps the
    weakest correlation.
    """
    if H0 is None:
        H0 = np.random.default_rng(seed).uniform(0.1, 1.0, size=(graph.n, d))
    H = power_iterate(graph, k) @ H0
    deg = graph.degrees
    norms = np.linalg.norm(H, axis=1)
    users, items = graph.groups()

    ukeep = users[_distinct(deg[users])]
    ikeep = items[_distinct(deg[items])]
    user_src = _src(deg[ukeep], norms[ukeep])
    item_src = _src(deg[ikeep], norms[ikeep])

    score_vals, cor_vals = [], []
    for u in users:
        cand = ikeep[ikeep != u]
        if cand.size < 2:
            continue
        scores = H[cand] @ H[u]
        score_vals.append(_src(deg[cand], scores))
        cor_vals.append(_src(norms[cand], scores))
    score_src = float(np.nanmin(score_vals)) if score_vals and not np.all(np.isnan(score_vals)) else float("nan")
    cor_src = float(np.nanmin(cor_vals)) if cor_vals and not np.all(np.isnan(cor_vals)) else float("nan")

    hub = None
    dominates = None
    top = items[deg[items] == deg[items].max()]
    if top.size == 1:
        hub = int(top[0])
        others = items[items != hub]
        dominates = bool(
            np.all(norms[hub] > norms[others])
            and all(H[u] @ H[hub] > np.max(H[others[others != u]] @ H[u]) for u in users if u != hub)
        )
    return DegreeOrderReport(k, user_src, item_src, score_src, cor_src, hub, dominates)


# graph families for checks and the CLI battery

def random_connected_graph(n: int, p: float, rng: np.random.Generator) -> LoopedGraph:
    """Random spanning tree plus independent extra edges with probability p."""
    A = np.zeros((n, n))
    perm = rng.permutation(n)
    for pos in range(1, n):
        a, b = perm[pos], perm[rng.integers(0, pos)]
        A[a, b] = A[b, a] = 1
    extra = np.triu(rng.random((n, n)) < p, 1)
    A = np.maximum(A, extra + extra.T)
    np.fill_diagonal(A, 0)
    return LoopedGraph(A)


def random_tree(n: int, rng: np.random.Generator) -> LoopedGraph:
    return random_connected_graph(n, 0.0, rng)


def random_bipartite_graph(num_users: int, num_items: int, p: float, rng: np.random.Generator,
                           self_loops: bool = True) -> LoopedGraph:
    """Connected random bipartite graph with users first, then items."""
    n = num_users + num_items
    while True:
        R = (rng.random((num_users, num_items)) < p).astype(float)
        A = np.zeros((n, n))
        A[:num_users, num_users:] = R
        A[num_users:, :num_users] = R.T
        if connected_components(A, directed=False)[0] == 1:
            return LoopedGraph(A, self_loops=self_loops, num_users=num_users)


def star_bipartite_graph(num_users: int, num_items: int, rng: np.random.Generator) -> LoopedGraph:
    """Every user links the hub item 0 plus one other item; other items stay low degree."""
    n = num_users + num_items
    A = np.zeros((n, n))
    hub = num_users
    for u in range(num_users):
        A[u, hub] = A[hub, u] = 1
        other = num_users + 1 + (u % (num_items - 1))
        A[u, other] = A[other, u] = 1
    return LoopedGraph(A, num_users=num_users)


def path_graph(n: int) -> LoopedGraph:
    A = np.zeros((n, n))
    idx = np.arange(n - 1)
    A[idx, idx + 1] = A[idx + 1, idx] = 1
    return LoopedGraph(A)


def random_degree_distinct_bipartite(rng: np.random.Generator, max_nodes: int = 30,
                                     min_distinct: int = 3, max_tries: int = 10_000) -> LoopedGraph:
    """Rejection-sample a connected bipartite graph where users and items each
    have at least ``min_distinct`` nodes with a degree unique in their group."""
    for _ in range(max_tries):
        nu = int(rng.integers(min_distinct + 1, max_nodes // 2 + 1))
        ni = int(rng.integers(min_distinct + 1, max_nodes - nu + 1))
        g = random_bipartite_graph(nu, ni, float(rng.uniform(0.25, 0.6)), rng)
        users, items = g.groups()
        deg = g.degrees
        if _distinct(deg[users]).sum() >= min_distinct and _distinct(deg[items]).sum() >= min_distinct:
            return g
    raise RuntimeError("could not sample a degree-distinct graph")
