"""Full-ranking evaluation: NDCG@N, MRR, MAP@N and the PRU/PRI fairness metrics.

Degrees used by PRU/PRI are training-graph degrees. Users whose relevant set
is empty are skipped; users whose per-user Spearman correlation is undefined
(fewer than two test items, or all of equal degree) drop out of the PRU mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import DatasetSplit

METRICS = ("ndcg", "mrr", "map", "pru", "pri")


class UndefinedMetric(ValueError):
    """A metric has no contributing users/items (e.g. constant input to Spearman)."""


@dataclass(frozen=True, eq=False)
class RankedList:
    user: int
    items: np.ndarray  # best first
    rank_of: np.ndarray  # 1-based rank per item index, 0 for non-candidates

    def rank(self, item: int) -> int:
        return int(self.rank_of[item])


@dataclass
class EvalReport:
    ndcg: float
    mrr: float
    map: float
    pru: float
    pri: float
    n: int = 20
    stratum: str = "all"
    num_users: int = 0
    per_user: list[dict] | None = field(default=None, repr=False)

    def metrics(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def to_text(self) -> str:
        lines = [f"stratum={self.stratum}", f"n={self.n}", f"users={self.num_users}"]
        lines += [f"{m}={_fmt(v)}" for m, v in self.metrics().items()]
        return "\n".join(lines) + "\n"

    def records(self, run_id: str) -> list[tuple[str, str, str, str]]:
        return [(run_id, self.stratum, m, _fmt(v)) for m, v in self.metrics().items()]


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else repr(float(v))


def rank_scores(scores: np.ndarray, exclude) -> RankedList:
    """Order candidate items by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.size, dtype=bool)
    excl = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    mask[excl] = False
    cand = np.flatnonzero(mask)
    order = cand[np.argsort(-scores[cand], kind="stable")]
    rank_of = np.zeros(scores.size, dtype=np.int64)
    rank_of[order] = np.arange(1, order.size + 1)
    return RankedList(-1, order, rank_of)


def rank_items(Z: np.ndarray, split: DatasetSplit, user: int, exclude_valid: bool = False) -> RankedList:
    """Rank every item the user has not trained on (and, optionally, not validated on)."""
    nu = split.num_users
    scores = Z[nu:] @ Z[user]
    exclude = set(split.train_items[user])
    if exclude_valid:
        exclude |= split.valid_items[user]
    ranked = rank_scores(scores, np.fromiter(sorted(exclude), dtype=np.int64))
    return RankedList(user, ranked.items, ranked.rank_of)


def _as_items(ranked) -> np.ndarray:
    return ranked.items if isinstance(ranked, RankedList) else np.asarray(ranked)


def ndcg_at(ranked, relevant, N: int = 20) -> float:
    if N < 1:
        raise ValueError("N must be >= 1")
    if not relevant:
        raise UndefinedMetric("empty relevant set")
    top = _as_items(ranked)[:N]
    dcg = sum(1.0 / math.log2(pos + 2) for pos, i in enumerate(top.tolist()) if i in relevant)
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(len(relevant), N)))
    return dcg / idcg


def _first_rank(ranked, relevant) -> int:
    if isinstance(ranked, RankedList):
        ranks = [ranked.rank_of[i] for i in relevant if ranked.rank_of[i] > 0]
        if ranks:
            return int(min(ranks))
    else:
        for pos, i in enumerate(np.asarray(ranked).tolist(), start=1):
            if i in relevant:
                return pos
    raise UndefinedMetric("no relevant item among the ranked candidates")


def mrr(ranked_lists: Sequence, relevant_sets: Sequence) -> float:
    vals = [1.0 / _first_rank(r, rel) for r, rel in zip(ranked_lists, relevant_sets) if rel]
    if not vals:
        raise UndefinedMetric("no users with relevant items")
    return float(np.mean(vals))


def average_precision(ranked, relevant, N: int = 20) -> float:
    hits = 0
    total = 0.0
    for pos, i in enumerate(_as_items(ranked)[:N].tolist(), start=1):
        if i in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


def map_at(ranked_lists: Sequence, relevant_sets: Sequence, N: int = 20) -> float:
    vals = [average_precision(r, rel, N) for r, rel in zip(ranked_lists, relevant_sets) if rel]
    if not vals:
        raise UndefinedMetric("no users with relevant items")
    return float(np.mean(vals))


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-d vectors of equal length")
    if x.size < 2:
        raise UndefinedMetric("spearman needs at least two observations")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        raise UndefinedMetric("spearman undefined for constant input")
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


def pru(ranked_lists: Sequence[RankedList], relevant_sets: Sequence, degrees) -> float:
    """Negated mean per-user Spearman(item degree, item rank) over test items."""
    degrees = np.asarray(degrees)
    vals = []
    for ranked, rel in zip(ranked_lists, relevant_sets):
        if len(rel) < 2:
            continue
        items = np.fromiter(sorted(rel), dtype=np.int64)
        try:
            vals.append(spearman(degrees[items], ranked.rank_of[items]))
        except UndefinedMetric:
            continue
    if not vals:
        raise UndefinedMetric("PRU: no user has a defined rank correlation")
    return -float(np.mean(vals))


def pri(ranked_lists: Sequence[RankedList], relevant_sets: Sequence, degrees) -> float:
    """Negated Spearman between item degree and the item's mean rank over its test users."""
    degrees = np.asarray(degrees)
    rank_sum = np.zeros(degrees.size)
    count = np.zeros(degrees.size, dtype=np.int64)
    for ranked, rel in zip(ranked_lists, relevant_sets):
        if not rel:
            continue
        items = np.fromiter(sorted(rel), dtype=np.int64)
        rank_sum[items] += ranked.rank_of[items]
        count[items] += 1
    qualifying = np.flatnonzero(count > 0)
    if qualifying.size < 2:
        raise UndefinedMetric("PRI: fewer than two items appear in test sets")
    return -spearman(degrees[qualifying], rank_sum[qualifying] / count[qualifying])


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetric:
        return float("nan")


def rank_all(Z: np.ndarray, split: DatasetSplit, on: str = "test") -> list[RankedList]:
    exclude_valid = on == "test"
    return [rank_items(Z, split, u, exclude_valid) for u in range(split.num_users)]


def relevant_for(split: DatasetSplit, on: str) -> tuple[frozenset, ...]:
    if on == "test":
        return split.test_items
    if on == "valid":
        return split.valid_items
    raise ValueError(f"unknown evaluation target {on!r}")


def report_from_rankings(
    ranked: Sequence[RankedList],
    relevant: Sequence,
    degrees,
    N: int = 20,
    stratum: str = "all",
    per_user: bool = False,
) -> EvalReport:
    users = [u for u, rel in enumerate(relevant) if rel]
    if not users:
        raise UndefinedMetric(f"stratum {stratum!r}: every user has an empty relevant set")
    rl = [ranked[u] for u in users]
    rs = [relevant[u] for u in users]
    ndcgs = [ndcg_at(r, rel, N) for r, rel in zip(rl, rs)]
    rrs = [1.0 / _first_rank(r, rel) for r, rel in zip(rl, rs)]
    aps = [average_precision(r, rel, N) for r, rel in zip(rl, rs)]
    detail = None
    if per_user:
        detail = [{"user": u, "ndcg": a, "rr": b, "ap": c} for u, a, b, c in zip(users, ndcgs, rrs, aps)]
    return EvalReport(
        ndcg=float(np.mean(ndcgs)),
        mrr=float(np.mean(rrs)),
        map=float(np.mean(aps)),
        pru=_safe(pru, rl, rs, degrees),
        pri=_safe(pri, rl, rs, degrees),
        n=N,
        stratum=stratum,
        num_users=len(users),
        per_user=detail,
    )


def evaluate(Z: np.ndarray, split: DatasetSplit, N: int = 20, on: str = "test", per_user: bool = False) -> EvalReport:
    ranked = rank_all(Z, split, on)
    return report_from_rankings(ranked, relevant_for(split, on), split.train_graph.item_degree, N, "all", per_user)


def validation_ndcg(Z: np.ndarray, split: DatasetSplit, N: int = 20) -> float:
    vals = [
        ndcg_at(rank_items(Z, split, u), rel, N)
        for u, rel in enumerate(split.valid_items) if rel
    ]
    return float(np.mean(vals)) if vals else float("nan")


def short_head_items(degrees, fraction: float = 0.2) -> np.ndarray:
    """Top ceil(fraction * |I|) items by degree; equal degrees favor the lower index."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    degrees = np.asarray(degrees)
    order = np.lexsort((np.arange(degrees.size), -degrees))
    return np.sort(order[: math.ceil(fraction * degrees.size)])


def stratified_eval(
    Z: np.ndarray, split: DatasetSplit, fraction: float = 0.2, N: int = 20, on: str = "test"
) -> tuple[EvalReport | None, EvalReport | None]:
    """Long-tail and short-head reports; a stratum with no test items comes back as None."""
    degrees = split.train_graph.item_degree
    head = frozenset(short_head_items(degrees, fraction).tolist())
    ranked = rank_all(Z, split, on)
    relevant = relevant_for(split, on)
    tail_rel = [frozenset(r - head) for r in relevant]
    head_rel = [frozenset(r & head) for r in relevant]
    out = []
    for name, rel in (("long_tail", tail_rel), ("short_head", head_rel)):
        if any(rel):
            out.append(report_from_rankings(ranked, rel, degrees, N, name))
        else:
            out.append(None)
    if out[0] is None and out[1] is None:
        raise UndefinedMetric("both strata are empty")
    return out[0], out[1]
