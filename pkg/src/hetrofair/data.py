"""Interaction ingestion, k-core filtering, graph construction and splitting.

Users and items are reindexed to contiguous integers in order of first
appearance. Where a single node index space is needed (embedding tables),
users come first and items follow at offset ``num_users``.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COLUMNS = ("user", "item", "label", "timestamp")


class DataError(ValueError):
    """Raised for unreadable, malformed or degenerate interaction data."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    label: str | None = None
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Immutable bipartite user-item graph.

    ``edge_users``/``edge_items`` list every edge once, sorted by (user, item).
    """

    num_users: int
    num_items: int
    edge_users: np.ndarray
    edge_items: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    user_adj: tuple[np.ndarray, ...] = field(repr=False)
    item_adj: tuple[np.ndarray, ...] = field(repr=False)
    user_degree: np.ndarray = field(repr=False)
    item_degree: np.ndarray = field(repr=False)

    @property
    def num_edges(self) -> int:
        return int(self.edge_users.size)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def density(self) -> float:
        return density(self.num_users, self.num_items, self.num_edges)

    @property
    def node_degree(self) -> np.ndarray:
        """Degrees over the stacked node space (users, then items)."""
        return np.concatenate([self.user_degree, self.item_degree])

    def has_edge(self, u: int, i: int) -> bool:
        adj = self.user_adj[u]
        pos = np.searchsorted(adj, i)
        return bool(pos < adj.size and adj[pos] == i)

    def interactions(self) -> list[Interaction]:
        return [
            Interaction(self.user_ids[u], self.item_ids[i])
            for u, i in zip(self.edge_users.tolist(), self.edge_items.tolist())
        ]


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train_graph: InteractionGraph
    train_items: tuple[frozenset, ...]
    valid_items: tuple[frozenset, ...]
    test_items: tuple[frozenset, ...]

    @property
    def num_users(self) -> int:
        return self.train_graph.num_users

    @property
    def num_items(self) -> int:
        return self.train_graph.num_items


@dataclass(frozen=True)
class LabelTable:
    item_label: dict[int, str]
    user_label: dict[int, str]


def density(num_users: int, num_items: int, num_edges: int) -> float:
    return num_edges / (num_users * num_items)


def _parse_columns(columns: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(columns, str):
        columns = [c.strip() for c in columns.split(",") if c.strip()]
    columns = tuple(columns)
    unknown = set(columns) - set(COLUMNS)
    if unknown:
        raise DataError(f"unknown column names: {sorted(unknown)}")
    if "user" not in columns or "item" not in columns:
        raise DataError("columns must include 'user' and 'item'")
    if len(set(columns)) != len(columns):
        raise DataError("duplicate column names")
    return columns


def load_interactions(
    path: str | Path,
    fmt: str = "tsv",
    columns: str | Sequence[str] = ("user", "item"),
) -> list[Interaction]:
    """Read delimiter-separated interactions, collapsing duplicate pairs.

    Lines starting with ``#`` are comments. Extra trailing fields beyond the
    declared columns are ignored. The first label seen for a pair is kept.
    """
    if fmt not in ("csv", "tsv"):
        raise DataError(f"unsupported format {fmt!r}")
    cols = _parse_columns(columns)
    delimiter = "," if fmt == "csv" else "\t"
    need = max(cols.index("user"), cols.index("item")) + 1

    seen: set[tuple[str, str]] = set()
    out: list[Interaction] = []
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row[0].startswith("#"):
                continue
            if len(row) < max(2, need):
                raise DataError(f"malformed row {lineno}: expected at least {max(2, need)} columns")
            values = dict(zip(cols, (v.strip() for v in row)))
            user, item = values["user"], values["item"]
            if not user or not item:
                raise DataError(f"malformed row {lineno}: empty user or item")
            ts = values.get("timestamp")
            try:
                timestamp = int(ts) if ts else None
            except ValueError:
                raise DataError(f"malformed row {lineno}: bad timestamp {ts!r}") from None
            if (user, item) in seen:
                continue
            seen.add((user, item))
            out.append(Interaction(user, item, values.get("label") or None, timestamp))
    if not out:
        raise DataError("empty result")
    return out


def write_interactions(
    interactions: Iterable[Interaction],
    path: str | Path,
    fmt: str = "tsv",
    columns: str | Sequence[str] = ("user", "item"),
) -> None:
    cols = _parse_columns(columns)
    delimiter = "," if fmt == "csv" else "\t"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        for x in interactions:
            row = {"user": x.user_id, "item": x.item_id, "label": x.label or "",
                   "timestamp": "" if x.timestamp is None else str(x.timestamp)}
            writer.writerow([row[c] for c in cols])


def dedupe(interactions: Iterable[Interaction]) -> list[Interaction]:
    seen = set()
    out = []
    for x in interactions:
        key = (x.user_id, x.item_id)
        if key not in seen:
            seen.add(key)
            out.append(x)
    return out


def k_core_filter(interactions: Sequence[Interaction], k: int) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until none remain.

    The surviving interactions keep their input order.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    current = dedupe(interactions)
    while True:
        ucount = Counter(x.user_id for x in current)
        icount = Counter(x.item_id for x in current)
        kept = [x for x in current if ucount[x.user_id] >= k and icount[x.item_id] >= k]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise DataError(f"k-core filter with k={k} left no interactions")
    return current


def _index(keys: Iterable[str]) -> dict[str, int]:
    index: dict[str, int] = {}
    for key in keys:
        if key not in index:
            index[key] = len(index)
    return index


def build_graph(
    interactions: Sequence[Interaction],
    user_index: dict[str, int] | None = None,
    item_index: dict[str, int] | None = None,
) -> InteractionGraph:
    """Build the bipartite graph, reindexing users/items by first appearance.

    Passing explicit index maps pins the node space, which lets a training
    subgraph share indices with the full graph.
    """
    if not interactions:
        raise DataError("cannot build a graph from no interactions")
    if user_index is None:
        user_index = _index(x.user_id for x in interactions)
    if item_index is None:
        item_index = _index(x.item_id for x in interactions)
    num_users, num_items = len(user_index), len(item_index)

    pairs = {(user_index[x.user_id], item_index[x.item_id]) for x in interactions}
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    eu, ei = edges[:, 0].copy(), edges[:, 1].copy()

    user_degree = np.bincount(eu, minlength=num_users)
    item_degree = np.bincount(ei, minlength=num_items)
    user_adj = tuple(np.split(ei, np.cumsum(user_degree)[:-1]))
    order = np.lexsort((eu, ei))
    item_adj = tuple(np.split(eu[order], np.cumsum(item_degree)[:-1]))

    user_ids = tuple(sorted(user_index, key=user_index.__getitem__))
    item_ids = tuple(sorted(item_index, key=item_index.__getitem__))
    return InteractionGraph(
        num_users=num_users,
        num_items=num_items,
        edge_users=eu,
        edge_items=ei,
        user_ids=user_ids,
        item_ids=item_ids,
        user_adj=user_adj,
        item_adj=item_adj,
        user_degree=user_degree,
        item_degree=item_degree,
    )


def _part_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_valid = math.floor(n * ratios[1] + 0.5)
    n_test = math.floor(n * ratios[2] + 0.5)
    return n - n_valid - n_test, n_valid, n_test


def split(
    interactions: Sequence[Interaction],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Per-user random train/valid/test partition.

    Each user's items are shuffled with a generator seeded by ``seed`` and cut
    by the rounded ratios. Items that would end up with no training edge get
    one of their held-out edges moved back into train, so every node of the
    training graph has degree >= 1.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    full = build_graph(interactions)
    rng = np.random.default_rng(seed)

    part = {}  # (u, i) -> 0 train, 1 valid, 2 test
    for u in range(full.num_users):
        items = full.user_adj[u]
        n_train, n_valid, _ = _part_sizes(items.size, ratios)
        if n_train < 1:
            raise DataError(f"user {full.user_ids[u]!r} would lose all train items")
        perm = items[rng.permutation(items.size)]
        for pos, i in enumerate(perm.tolist()):
            part[(u, i)] = 0 if pos < n_train else (1 if pos < n_train + n_valid else 2)

    train_degree = np.zeros(full.num_items, dtype=np.int64)
    for (u, i), p in part.items():
        if p == 0:
            train_degree[i] += 1
    for i in np.flatnonzero(train_degree == 0).tolist():
        u = int(full.item_adj[i][0])
        part[(u, i)] = 0

    user_index = {uid: n for n, uid in enumerate(full.user_ids)}
    item_index = {iid: n for n, iid in enumerate(full.item_ids)}
    buckets: list[list[set]] = [[set() for _ in range(full.num_users)] for _ in range(3)]
    for (u, i), p in part.items():
        buckets[p][u].add(i)
    train_interactions = [
        x for x in interactions
        if part[(user_index[x.user_id], item_index[x.item_id])] == 0
    ]
    train_graph = build_graph(train_interactions, user_index, item_index)
    return DatasetSplit(
        train_graph=train_graph,
        train_items=tuple(frozenset(s) for s in buckets[0]),
        valid_items=tuple(frozenset(s) for s in buckets[1]),
        test_items=tuple(frozenset(s) for s in buckets[2]),
    )


def split_from_parts(
    interactions: Sequence[Interaction], parts: Sequence[str]
) -> DatasetSplit:
    """Rebuild a split from per-interaction part tags ('train'/'valid'/'test')."""
    full = build_graph(interactions)
    user_index = {uid: n for n, uid in enumerate(full.user_ids)}
    item_index = {iid: n for n, iid in enumerate(full.item_ids)}
    code = {"train": 0, "valid": 1, "test": 2}
    buckets: list[list[set]] = [[set() for _ in range(full.num_users)] for _ in range(3)]
    train_interactions = []
    for x, p in zip(interactions, parts):
        if p not in code:
            raise DataError(f"unknown split part {p!r}")
        buckets[code[p]][user_index[x.user_id]].add(item_index[x.item_id])
        if p == "train":
            train_interactions.append(x)
    train_graph = build_graph(train_interactions, user_index, item_index)
    return DatasetSplit(
        train_graph=train_graph,
        train_items=tuple(frozenset(s) for s in buckets[0]),
        valid_items=tuple(frozenset(s) for s in buckets[1]),
        test_items=tuple(frozenset(s) for s in buckets[2]),
    )


def label_table(graph: InteractionGraph, item_label: dict[int, str]) -> LabelTable:
    """Infer each user's dominant label from their labeled neighbor items.

    Ties go to the lexicographically smallest label.
    """
    user_label = {}
    for u in range(graph.num_users):
        counts = Counter(item_label[i] for i in graph.user_adj[u].tolist() if i in item_label)
        if counts:
            best = max(counts.values())
            user_label[u] = min(lbl for lbl, c in counts.items() if c == best)
    return LabelTable(item_label=dict(item_label), user_label=user_label)


def item_labels(graph: InteractionGraph, interactions: Iterable[Interaction]) -> dict[int, str]:
    """First label seen per item, keyed by the graph's item index."""
    index = {iid: n for n, iid in enumerate(graph.item_ids)}
    labels: dict[int, str] = {}
    for x in interactions:
        if x.label and x.item_id in index:
            labels.setdefault(index[x.item_id], x.label)
    return labels


def homophily_score(graph: InteractionGraph, labels: LabelTable | dict[int, str]) -> float:
    """Fraction of edges whose item label equals the user's dominant label.

    Only edges where both endpoint labels are defined count.
    """
    if not isinstance(labels, LabelTable):
        labels = label_table(graph, labels)
    matched = total = 0
    for u, i in zip(graph.edge_users.tolist(), graph.edge_items.tolist()):
        lu = labels.user_label.get(u)
        li = labels.item_label.get(i)
        if lu is None or li is None:
            continue
        total += 1
        matched += lu == li
    if total == 0:
        raise DataError("homophily undefined: no edge has both endpoint labels")
    return matched / total


def synthetic_interactions(
    num_users: int,
    num_items: int,
    per_user: int,
    seed: int = 0,
    popularity: float = 1.0,
    blocks: int = 1,
    in_block: float = 1.0,
) -> list[Interaction]:
    """Generate a random implicit-feedback dataset.

    Items are drawn without replacement with Zipf-like weights
    ``(rank + 1) ** -popularity``. With ``blocks > 1`` users and items are
    split into groups and a fraction ``in_block`` of each user's items come
    from the user's own group.
    """
    rng = np.random.default_rng(seed)
    weights = (np.arange(num_items) + 1.0) ** -popularity
    item_block = np.arange(num_items) % blocks
    out = []
    for u in range(num_users):
        b = u % blocks
        w = weights.copy()
        if blocks > 1:
            w = np.where(item_block == b, w * in_block, w * (1 - in_block) + 1e-12)
        chosen = rng.choice(num_items, size=min(per_user, num_items), replace=False, p=w / w.sum())
        out.extend(Interaction(f"u{u}", f"i{i}", f"c{item_block[i]}") for i in sorted(chosen.tolist()))
    return out
