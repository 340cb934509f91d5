"""Synthetic square-scene dataset, equivalence/noise transforms, ingestion.

Coordinates are image-normalized with y growing downward, so "Above" means
a smaller center y.  Every object is a square of one of two sizes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .canon import FormulaSet, transitive_closure
from .errors import ValidationError
from .sg_core import Layout, RelationVocab, SceneGraph, SceneObject, read_graphs

ABOVE = "Above"
OPPOSITE = "OppositeHorizontally"
XNEAR = "XNear"
BELOW = "Below"
SIZE_NAMES = ("small", "large")


@dataclass(frozen=True)
class SynthConfig:
    n_objects: int | tuple[int, int] = 16
    small_size: float = 0.25
    large_size: float = 0.5
    xnear_threshold: float = 0.10
    keep_prob: float = 1.0  # subsampling of non-transitive relation edges
    include_below: bool = False  # adds Below, the converse of Above (not in the original testbed)
    seed: int = 0

    def __post_init__(self):
        for name in ("small_size", "large_size", "xnear_threshold"):
            x = getattr(self, name)
            if not 0.0 < x < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {x}")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ValidationError("keep_prob must lie in [0, 1]")
        n = self.n_objects
        if isinstance(n, (list, tuple)):
            object.__setattr__(self, "n_objects", (int(n[0]), int(n[1])))
            if not 1 <= n[0] <= n[1]:
                raise ValidationError("bad n_objects range")
        elif n < 1:
            raise ValidationError("n_objects must be positive")

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if isinstance(d.get("n_objects"), list):
            d["n_objects"] = tuple(d["n_objects"])
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        if isinstance(d["n_objects"], tuple):
            d["n_objects"] = list(d["n_objects"])
        return d


def synth_vocab(include_below: bool = False) -> RelationVocab:
    rels = [ABOVE, OPPOSITE, XNEAR] + ([BELOW] if include_below else [])
    return RelationVocab(rels, SIZE_NAMES, {"size": ["S", "L"]})


def synth_formulas(vocab: RelationVocab) -> FormulaSet:
    """The true relation properties of the synthetic scenes."""
    if BELOW in vocab.relations:
        return FormulaSet.from_names(vocab, [ABOVE, BELOW], [(ABOVE, BELOW), (BELOW, ABOVE)])
    return FormulaSet.from_names(vocab, [ABOVE])


def _centers(layout: Layout) -> tuple[np.ndarray, np.ndarray]:
    b = layout.boxes
    return 0.5 * (b[:, 0] + b[:, 2]), 0.5 * (b[:, 1] + b[:, 3])


_GEOMETRIC = {ABOVE, OPPOSITE, XNEAR, BELOW}


def geometric_relations(layout: Layout, vocab: RelationVocab, xnear_threshold: float = 0.10) -> np.ndarray:
    """Boolean ``A[r, i, j]`` for every relation the geometry determines.

    Relations the vocabulary names but geometry does not define stay empty.
    """
    cx, cy = _centers(layout)
    n = len(layout)
    adj = np.zeros((vocab.num_relations, n, n), dtype=bool)
    rules = {
        ABOVE: cy[:, None] < cy[None, :],
        BELOW: cy[:, None] > cy[None, :],
        OPPOSITE: (cx[:, None] - 0.5) * (cx[None, :] - 0.5) < 0.0,
        XNEAR: np.abs(cx[:, None] - cx[None, :]) <= xnear_threshold,
    }
    for name, mat in rules.items():
        if name in vocab.relations:
            adj[vocab.relation_id(name)] = mat
    for r in range(vocab.num_relations):
        np.fill_diagonal(adj[r], False)
    return adj


def transitive_reduction(adj: np.ndarray) -> np.ndarray:
    """Edges of a DAG not implied by a path of two or more steps."""
    closed = transitive_closure(adj).astype(np.int64)
    return adj & ~((closed @ closed) > 0)


def _objects(sizes: np.ndarray) -> tuple[SceneObject, ...]:
    return tuple(SceneObject(int(s), {"size": "SL"[int(s)]}) for s in sizes)


def _sample_scene(cfg: SynthConfig, vocab: RelationVocab, rng: np.random.Generator):
    n = cfg.n_objects
    if isinstance(n, tuple):
        n = int(rng.integers(n[0], n[1] + 1))
    sizes = rng.integers(0, 2, size=n)
    side = np.where(sizes == 0, cfg.small_size, cfg.large_size)
    half = side / 2.0
    cx = rng.uniform(half, 1.0 - half)
    cy = rng.uniform(half, 1.0 - half)
    layout = Layout(np.stack([cx - half, cy - half, cx + half, cy + half], axis=1))
    full = geometric_relations(layout, vocab, cfg.xnear_threshold)

    emitted = np.zeros_like(full)
    above = vocab.relation_id(ABOVE)
    reduced = transitive_reduction(full[above])
    if BELOW in vocab.relations:
        below = vocab.relation_id(BELOW)
        flip = rng.random((n, n)) < 0.5
        emitted[above] = reduced & ~flip
        emitted[below] = (reduced & flip).T
    else:
        emitted[above] = reduced
    for name in (OPPOSITE, XNEAR):
        r = vocab.relation_id(name)
        keep = rng.random((n, n)) < cfg.keep_prob
        emitted[r] = full[r] & keep
    graph = SceneGraph.from_adjacency(vocab, _objects(sizes), emitted)
    return graph, layout


def synth_generate(config: SynthConfig, count: int) -> list[tuple[SceneGraph, Layout]]:
    vocab = synth_vocab(config.include_below)
    rng = np.random.default_rng(config.seed)
    return [_sample_scene(config, vocab, rng) for _ in range(count)]


# --- transforms ----------------------------------------------------------------


def _reachable(adj: np.ndarray, src: int, dst: int) -> bool:
    seen = np.zeros(adj.shape[0], dtype=bool)
    stack = [src]
    seen[src] = True
    while stack:
        k = stack.pop()
        for m in np.nonzero(adj[k] & ~seen)[0]:
            if m == dst:
                return True
            seen[m] = True
            stack.append(int(m))
    return False


def semantic_equivalent_transform(
    g: SceneGraph,
    layout: Layout | None,
    f: FormulaSet,
    rng: np.random.Generator,
    xnear_threshold: float = 0.10,
    p_drop: float = 0.5,
) -> SceneGraph:
    """A random graph with the same closure as the full geometric relation set.

    Recomputes all location-based relations, drops one side of converse
    pairs, then drops edges implied through transitivity.  An edge is only
    removed when the remaining edges still imply it, so the closure under
    ``f`` never changes.  Relations the geometry does not define keep the
    input graph's edges.
    """
    if layout is None:
        raise ValidationError("semantic_equivalent_transform needs the layout")
    layout.check_nodes(g)
    vocab = g.vocab
    f.check(vocab.num_relations)
    adj = geometric_relations(layout, vocab, xnear_threshold)
    given = g.adjacency()
    for r, name in enumerate(vocab.relations):
        if name not in _GEOMETRIC:
            adj[r] = given[r]

    conv = set(f.converse)
    partners = {r: sorted({b for a, b in conv if a == r} | {a for a, b in conv if b == r})
                for r in range(vocab.num_relations)}
    done: set[frozenset] = set()
    for r, i, j in zip(*np.nonzero(adj)):
        e = (int(r), int(i), int(j))
        for b in partners[e[0]]:
            if not adj[e]:
                break
            partner = (b, e[2], e[1])
            key = frozenset((e, partner))
            if not adj[partner] or key in done:
                continue
            done.add(key)
            if rng.random() >= p_drop:
                continue
            candidates = []
            if (b, e[0]) in conv:  # partner implies e
                candidates.append(e)
            if (e[0], b) in conv:  # e implies partner
                candidates.append(partner)
            adj[candidates[int(rng.integers(len(candidates)))]] = False

    for r in sorted(f.transitive):
        for i, j in zip(*np.nonzero(adj[r])):
            i, j = int(i), int(j)
            if rng.random() >= p_drop:
                continue
            adj[r, i, j] = False
            support = adj[r].copy()
            for a, b in sorted(conv):
                if b == r:
                    support |= adj[a].T
            if not _reachable(support, i, j):
                adj[r, i, j] = True
    return SceneGraph.from_adjacency(vocab, g.objects, adj)


def noise_transform(g: SceneGraph, fraction: float = 0.10, rng: np.random.Generator | None = None) -> SceneGraph:
    """Relabel ``ceil(fraction * |E|)`` uniformly chosen edges.

    The new label is uniform over the other relations, excluding labels that
    would collide with an edge already present between the same ordered pair
    (falls back to any other label when every choice collides).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    R = g.vocab.num_relations
    edges = list(g.edges)
    k = math.ceil(fraction * len(edges))
    if k == 0 or R < 2:
        return g
    present = set(edges)
    for idx in sorted(rng.choice(len(edges), size=k, replace=False).tolist()):
        i, r, j = edges[idx]
        others = [x for x in range(R) if x != r]
        free = [x for x in others if (i, x, j) not in present]
        r_new = int(rng.choice(free or others))
        present.discard((i, r, j))
        present.add((i, r_new, j))
        edges[idx] = (i, r_new, j)
    return g.with_edges(edges)


def load_dataset(path, vocab: RelationVocab, require_layout: bool = True) -> list[tuple[SceneGraph, Layout]]:
    """Any JSON-lines file in the scene-graph record format."""
    out = []
    for lineno, (graph, layout) in enumerate(read_graphs(path, vocab), start=1):
        if require_layout and layout is None:
            raise ValidationError(f"record {lineno} has no boxes")
        if not isinstance(graph, SceneGraph):
            graph = graph.unweighted()
        out.append((graph, layout))
    return out


def load_synth_config(path) -> SynthConfig:
    with open(path) as fh:
        return SynthConfig.from_json(json.load(fh))
