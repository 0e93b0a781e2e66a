import numpy as np
import pytest

from hetrofair import data as D


def make_interactions(pairs, labels=None):
    labels = labels or {}
    return [D.Interaction(str(u), str(i), labels.get(str(i))) for u, i in pairs]


def random_graph(rng, max_users=8, max_items=8, p=0.4):
    """Random bipartite graph in which every node has degree >= 1."""
    while True:
        nu = int(rng.integers(1, max_users + 1))
        ni = int(rng.integers(1, max_items + 1))
        R = rng.random((nu, ni)) < p
        if R.any(axis=1).all() and R.any(axis=0).all():
            pairs = [(f"u{u}", f"i{i}") for u, i in zip(*np.nonzero(R))]
            return D.build_graph(make_interactions(pairs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_graph():
    # 6 users, 8 items, every node connected
    rng = np.random.default_rng(7)
    pairs = set()
    for u in range(6):
        for i in rng.choice(8, size=3, replace=False):
            pairs.add((u, int(i)))
    for i in range(8):
        pairs.add((i % 6, i))
    return D.build_graph(make_interactions(sorted(pairs)))


# acceptance results, one line per criterion, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
