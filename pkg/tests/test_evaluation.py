import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hetrofair import data as D
from hetrofair import evaluation as E


def ranked(order, n_items=None):
    order = np.asarray(order, dtype=np.int64)
    n = n_items or (int(order.max()) + 1 if order.size else 0)
    rank_of = np.zeros(n, dtype=np.int64)
    rank_of[order] = np.arange(1, order.size + 1)
    return E.RankedList(0, order, rank_of)


# ---- brute-force oracles, written independently of the package

def oracle_ndcg(order, rel, N):
    gains = [1.0 if order[p] in rel else 0.0 for p in range(min(N, len(order)))]
    dcg = sum(g / math.log(p + 2, 2) for p, g in enumerate(gains))
    ideal = sorted([1.0] * len(rel) + [0.0] * N, reverse=True)[:N]
    return dcg / sum(g / math.log(p + 2, 2) for p, g in enumerate(ideal))


def oracle_ap(order, rel, N):
    precisions = []
    for cut in range(1, min(N, len(order)) + 1):
        if order[cut - 1] in rel:
            precisions.append(len(set(order[:cut]) & rel) / cut)
    return sum(precisions) / len(rel)


def oracle_rr(order, rel):
    return next(1.0 / (p + 1) for p, i in enumerate(order) if i in rel)


# ---------------------------------------------------------------- hand values

def test_ndcg_hand_value():
    assert E.ndcg_at(ranked([0, 1, 2]), {1}, 3) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert E.ndcg_at(ranked([0, 1, 2]), {1}, 3) == pytest.approx(0.63093, abs=1e-5)


def test_ndcg_bounds():
    assert E.ndcg_at(ranked([3, 1, 2]), {3, 1}, 20) == 1.0
    assert E.ndcg_at(ranked([0, 1, 2]), {2}, 2) == 0.0
    with pytest.raises(E.UndefinedMetric):
        E.ndcg_at(ranked([0, 1]), set(), 5)
    with pytest.raises(ValueError):
        E.ndcg_at(ranked([0, 1]), {0}, 0)


def test_mrr_hand_value():
    lists = [ranked([5, 0, 1, 2, 3, 4]), ranked([0, 1, 2, 5, 3, 4])]
    assert E.mrr(lists, [{5}, {5}]) == pytest.approx(0.625, abs=1e-15)


def test_mrr_looks_past_cutoff():
    order = list(range(30))
    assert E.mrr([ranked(order)], [{25}]) == pytest.approx(1 / 26)


def test_ap_hand_value():
    assert E.average_precision(ranked([0, 1, 2]), {0, 2}, 20) == pytest.approx(5 / 6, abs=1e-15)
    assert E.map_at([ranked([0, 1, 2]), ranked([1, 0, 2])], [{0, 2}, {1}], 20) == pytest.approx((5 / 6 + 1) / 2)


def test_ap_normalised_by_relevant_count():
    # relevant item beyond the cutoff still counts in the denominator
    assert E.average_precision(ranked([0, 1, 2]), {0, 2}, 1) == pytest.approx(0.5)


def test_spearman_hand_value():
    assert E.spearman([1, 2, 3, 4, 5], [2, 3, 1, 4, 5]) == pytest.approx(0.7, abs=1e-15)
    assert E.spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]) == pytest.approx(0.8, abs=1e-15)  # sum d^2 = 4
    assert E.spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert E.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_undefined():
    with pytest.raises(E.UndefinedMetric):
        E.spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(E.UndefinedMetric):
        E.spearman([1], [2])
    with pytest.raises(ValueError):
        E.spearman([1, 2], [1, 2, 3])


# ---------------------------------------------------------------- oracle sweeps

def test_metrics_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        order = rng.permutation(n).tolist()
        rel = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        N = int(rng.integers(1, 30))
        r = ranked(order, n)
        assert E.ndcg_at(r, rel, N) == pytest.approx(oracle_ndcg(order, rel, N), abs=1e-12)
        assert E.average_precision(r, rel, N) == pytest.approx(oracle_ap(order, rel, N), abs=1e-12)
        assert E.mrr([r], [rel]) == pytest.approx(oracle_rr(order, rel), abs=1e-12)
        # list and RankedList inputs agree
        assert E.ndcg_at(order, rel, N) == E.ndcg_at(r, rel, N)


@pytest.mark.filterwarnings("ignore::scipy.stats.ConstantInputWarning")
@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=25), st.integers(0, 2 ** 32 - 1))
def test_spearman_matches_scipy(x, seed):
    y = np.random.default_rng(seed).integers(0, 5, size=len(x))
    ref = stats.spearmanr(x, y).statistic
    if np.isnan(ref):
        with pytest.raises(E.UndefinedMetric):
            E.spearman(x, y)
    else:
        assert E.spearman(x, y) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    r = ranked(rng.permutation(n), n)
    rel = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
    for v in (E.ndcg_at(r, rel, 10), E.average_precision(r, rel, 10), E.mrr([r], [rel])):
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------- ranking

def test_rank_scores_ties_and_exclusion():
    r = E.rank_scores(np.array([0.5, 0.9, 0.5, 0.1]), [1])
    assert r.items.tolist() == [0, 2, 3]
    assert r.rank_of.tolist() == [1, 0, 2, 3]


def test_rank_items_excludes_train_and_optionally_valid():
    inter = D.synthetic_interactions(10, 12, 6, seed=2)
    sp = D.split(inter, (0.6, 0.2, 0.2), 0)
    Z = np.random.default_rng(0).normal(size=(sp.train_graph.num_nodes, 4))
    for u in range(sp.num_users):
        r = E.rank_items(Z, sp, u)
        assert not set(r.items.tolist()) & sp.train_items[u]
        assert len(r.items) == sp.num_items - len(sp.train_items[u])
        r2 = E.rank_items(Z, sp, u, exclude_valid=True)
        assert not set(r2.items.tolist()) & (sp.train_items[u] | sp.valid_items[u])


def test_evaluate_matches_loop_oracle():
    inter = D.synthetic_interactions(40, 30, 10, seed=3, popularity=1.0)
    sp = D.split(inter, (0.8, 0.1, 0.1), 3)
    Z = np.random.default_rng(1).normal(size=(sp.train_graph.num_nodes, 6))
    nu = sp.num_users
    nd, rr, ap = [], [], []
    for u in range(nu):
        rel = set(sp.test_items[u])
        if not rel:
            continue
        seen = sp.train_items[u] | sp.valid_items[u]
        cand = [i for i in range(sp.num_items) if i not in seen]
        s = {i: float(sum(Z[u, f] * Z[nu + i, f] for f in range(6))) for i in cand}
        order = sorted(cand, key=lambda i: (-s[i], i))
        nd.append(oracle_ndcg(order, rel, 20))
        rr.append(oracle_rr(order, rel))
        ap.append(oracle_ap(order, rel, 20))
    rep = E.evaluate(Z, sp)
    assert rep.ndcg == pytest.approx(np.mean(nd), abs=1e-12)
    assert rep.mrr == pytest.approx(np.mean(rr), abs=1e-12)
    assert rep.map == pytest.approx(np.mean(ap), abs=1e-12)
    assert rep.num_users == len(nd)
    assert set(rep.metrics()) == {"ndcg", "mrr", "map", "pru", "pri"}


def test_scale_invariance():
    inter = D.synthetic_interactions(30, 40, 20, seed=4)
    sp = D.split(inter, (0.8, 0.1, 0.1), 0)
    Z = np.random.default_rng(2).normal(size=(sp.train_graph.num_nodes, 5))
    a, b = E.evaluate(Z, sp).metrics(), E.evaluate(2.0 * Z, sp).metrics()
    assert not any(math.isnan(v) for v in a.values())
    assert a == b


# ---------------------------------------------------------------- fairness

def test_pru_extremes():
    degrees = np.array([50, 40, 30, 20, 10, 5])
    popular_first = ranked([0, 1, 2, 3, 4, 5])
    popular_last = ranked([5, 4, 3, 2, 1, 0])
    rel = [{0, 2, 4, 5}]
    assert E.pru([popular_first], rel, degrees) == pytest.approx(1.0)
    assert E.pru([popular_last], rel, degrees) == pytest.approx(-1.0)


def test_pru_skips_undefined_users():
    degrees = np.array([5, 5, 3, 1])
    lists = [ranked([0, 1, 2, 3]), ranked([0, 1, 2, 3]), ranked([3, 2, 1, 0])]
    # user 0 has one item, user 1 has equal degrees: only user 2 counts
    assert E.pru(lists, [{0}, {0, 1}, {1, 3}], degrees) == pytest.approx(-1.0)
    with pytest.raises(E.UndefinedMetric):
        E.pru(lists[:2], [{0}, {0, 1}], degrees)


def test_pri_extremes():
    degrees = np.array([9, 7, 5, 3, 1])
    lists = [ranked([0, 1, 2, 3, 4]), ranked([0, 1, 2, 3, 4])]
    rel = [{0, 1, 2, 3, 4}, {0, 1, 2, 3, 4}]
    assert E.pri(lists, rel, degrees) == pytest.approx(1.0)
    rev = [ranked([4, 3, 2, 1, 0])]
    assert E.pri(rev, [{0, 1, 2, 3, 4}], degrees) == pytest.approx(-1.0)


def test_pri_uses_mean_rank_over_test_users():
    degrees = np.array([3, 2, 1])
    lists = [ranked([0, 1, 2]), ranked([2, 1, 0])]
    # item 0 appears only for user 0 (rank 1), item 2 only for user 1 (rank 1), item 1 for both (rank 2)
    value = E.pri(lists, [{0, 1}, {1, 2}], degrees)
    assert value == pytest.approx(-stats.spearmanr([3, 2, 1], [1, 2, 1]).statistic)


def test_random_scores_give_near_zero_pru():
    rng = np.random.default_rng(11)
    n_items = 200
    degrees = rng.integers(1, 100, size=n_items)
    lists, rels = [], []
    for _ in range(3000):
        lists.append(ranked(rng.permutation(n_items), n_items))
        rels.append(set(rng.choice(n_items, size=5, replace=False).tolist()))
    assert abs(E.pru(lists, rels, degrees)) < 0.05


# ---------------------------------------------------------------- strata

def test_short_head_size_and_ties():
    deg = np.array([5, 9, 9, 1, 2, 9, 3, 0, 4, 6])
    head = E.short_head_items(deg, 0.2)
    assert head.tolist() == [1, 2]
    assert E.short_head_items(deg, 0.25).tolist() == [1, 2, 5]  # ceil(2.5) = 3
    assert len(E.short_head_items(np.ones(11), 0.2)) == 3
    with pytest.raises(ValueError):
        E.short_head_items(deg, 0.0)


def test_stratified_partitions_test_items():
    inter = D.synthetic_interactions(50, 40, 10, seed=5, popularity=1.2)
    sp = D.split(inter, (0.8, 0.1, 0.1), 0)
    Z = np.random.default_rng(3).normal(size=(sp.train_graph.num_nodes, 8))
    tail, head = E.stratified_eval(Z, sp)
    assert tail.stratum == "long_tail" and head.stratum == "short_head"
    head_items = set(E.short_head_items(sp.train_graph.item_degree).tolist())
    n_tail = sum(1 for r in sp.test_items if r - head_items)
    n_head = sum(1 for r in sp.test_items if r & head_items)
    assert (tail.num_users, head.num_users) == (n_tail, n_head)


def test_stratified_empty_stratum_is_none():
    inter = D.synthetic_interactions(20, 15, 6, seed=6)
    sp = D.split(inter, (0.8, 0.1, 0.1), 0)
    Z = np.random.default_rng(4).normal(size=(sp.train_graph.num_nodes, 4))
    tail, head = E.stratified_eval(Z, sp, fraction=1.0)
    assert tail is None and head is not None
    assert head.ndcg == pytest.approx(E.evaluate(Z, sp).ndcg)


def test_stratified_both_empty_raises():
    inter = D.synthetic_interactions(10, 8, 4, seed=0)
    sp = D.split(inter, (1.0, 0.0, 0.0), 0)
    Z = np.zeros((sp.train_graph.num_nodes, 2))
    with pytest.raises(E.UndefinedMetric):
        E.stratified_eval(Z, sp)


def test_report_text_and_records():
    rep = E.EvalReport(0.5, 0.25, 0.125, float("nan"), -0.5, stratum="all", num_users=3)
    text = rep.to_text()
    assert "ndcg=0.5\n" in text and "pru=nan\n" in text
    assert rep.records("abc")[0] == ("abc", "all", "ndcg", "0.5")
