import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from sgcanon.canon import FormulaSet
from sgcanon.sg_core import RelationVocab, SceneGraph, SceneObject

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_vocab(num_relations=3, num_categories=2):
    return RelationVocab(
        [f"r{k}" for k in range(num_relations)],
        [f"c{k}" for k in range(num_categories)],
        {"size": ["S", "L"]},
    )


def random_graph(rng, vocab, n, density=0.3):
    adj = rng.random((vocab.num_relations, n, n)) < density
    for r in range(vocab.num_relations):
        np.fill_diagonal(adj[r], False)
    objs = [SceneObject(int(c)) for c in rng.integers(0, vocab.num_categories, size=n)]
    return SceneGraph.from_adjacency(vocab, objs, adj)


def random_formulas(rng, R, p=0.4):
    trans = [r for r in range(R) if rng.random() < p]
    conv = [(a, b) for a in range(R) for b in range(R) if rng.random() < p / R]
    return FormulaSet(frozenset(trans), frozenset(conv))


def consistent_formulas(rng, R):
    """Symmetric converse pairs whose partners agree on transitivity."""
    perm = rng.permutation(R)
    conv, trans = set(), set()
    k = 0
    while k < R:
        if k + 1 < R and rng.random() < 0.5:
            a, b = int(perm[k]), int(perm[k + 1])
            conv |= {(a, b), (b, a)}
            if rng.random() < 0.5:
                trans |= {a, b}
            k += 2
        else:
            a = int(perm[k])
            if rng.random() < 0.3:
                conv.add((a, a))
            if rng.random() < 0.5:
                trans.add(a)
            k += 1
    return FormulaSet(frozenset(trans), frozenset(conv))


@st.composite
def graphs(draw, max_nodes=8, max_relations=3, min_nodes=0):
    R = draw(st.integers(1, max_relations))
    n = draw(st.integers(min_nodes, max_nodes))
    vocab = make_vocab(R)
    pairs = [(i, r, j) for i in range(n) for r in range(R) for j in range(n) if i != j]
    edges = draw(st.lists(st.sampled_from(pairs), max_size=min(len(pairs), 30))) if pairs else []
    cats = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    return SceneGraph(vocab, tuple(SceneObject(c) for c in cats), tuple(edges))


@st.composite
def formula_sets(draw, num_relations):
    rels = list(range(num_relations))
    trans = draw(st.sets(st.sampled_from(rels)))
    conv = draw(st.sets(st.tuples(st.sampled_from(rels), st.sampled_from(rels))))
    return FormulaSet(frozenset(trans), frozenset(conv))


@pytest.fixture
def vocab3():
    return make_vocab(3)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
