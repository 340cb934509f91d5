"""Scene-graph data model, relation vocabulary and JSON-lines serialization.

A scene graph is a list of objects (category id plus free-form attributes)
and a set of directed labeled edges ``(i, r, j)``.  Edge sets are stored
sorted by key so iteration order never depends on construction order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import ParseError, ShapeError, VocabularyError

Edge = tuple[int, int, int]


@dataclass(frozen=True)
class RelationVocab:
    relations: tuple[str, ...]
    categories: tuple[str, ...]
    attributes: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "categories", tuple(self.categories))
        attrs = self.attributes
        if isinstance(attrs, Mapping):
            attrs = attrs.items()
        object.__setattr__(
            self, "attributes", tuple(sorted((k, tuple(v)) for k, v in attrs))
        )
        if len(set(self.relations)) != len(self.relations):
            raise VocabularyError("duplicate relation name")
        if len(set(self.categories)) != len(self.categories):
            raise VocabularyError("duplicate category name")
        object.__setattr__(self, "_rel_ids", {n: i for i, n in enumerate(self.relations)})
        object.__setattr__(self, "_cat_ids", {n: i for i, n in enumerate(self.categories)})

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def relation_id(self, name: str) -> int:
        try:
            return self._rel_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown relation {name!r}") from None

    def category_id(self, name: str) -> int:
        try:
            return self._cat_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown category {name!r}") from None

    def check_relation(self, r: int) -> int:
        if not 0 <= r < self.num_relations:
            raise VocabularyError(f"relation id {r} out of range [0, {self.num_relations})")
        return r

    def check_attribute(self, key: str, value: str) -> None:
        schema = dict(self.attributes)
        if not schema:
            return
        if key not in schema:
            raise VocabularyError(f"unknown attribute {key!r}")
        if value not in schema[key]:
            raise VocabularyError(f"attribute {key!r} has no value {value!r}")

    def to_dict(self) -> dict:
        return {
            "relations": list(self.relations),
            "categories": list(self.categories),
            "attributes": {k: list(v) for k, v in self.attributes},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RelationVocab":
        try:
            return cls(d["relations"], d["categories"], d.get("attributes", {}))
        except KeyError as exc:
            raise ParseError(f"vocabulary missing field {exc}") from None


def load_vocab(path) -> RelationVocab:
    with open(path) as fh:
        return RelationVocab.from_dict(json.load(fh))


def save_vocab(vocab: RelationVocab, path) -> None:
    Path(path).write_text(json.dumps(vocab.to_dict(), sort_keys=True, indent=1) + "\n")


@dataclass(frozen=True)
class SceneObject:
    category: int
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        attrs = self.attributes
        if isinstance(attrs, Mapping):
            attrs = attrs.items()
        object.__setattr__(self, "attributes", tuple(sorted(attrs)))

    @property
    def attrs(self) -> dict[str, str]:
        return dict(self.attributes)


def _make_objects(vocab: RelationVocab, objects) -> tuple[SceneObject, ...]:
    out = []
    for o in objects:
        if not isinstance(o, SceneObject):
            o = SceneObject(int(o))
        if not 0 <= o.category < vocab.num_categories:
            raise VocabularyError(f"category id {o.category} out of range")
        for k, v in o.attributes:
            vocab.check_attribute(k, v)
        out.append(o)
    return tuple(out)


def _check_edge(vocab: RelationVocab, n: int, e) -> Edge:
    i, r, j = (int(x) for x in e)
    if not (0 <= i < n and 0 <= j < n):
        raise ShapeError(f"edge {(i, r, j)} references a node outside [0, {n})")
    if i == j:
        raise ShapeError(f"self-loop {(i, r, j)} is not allowed")
    vocab.check_relation(r)
    return (i, r, j)


@dataclass(frozen=True)
class SceneGraph:
    """Objects plus an ordered set of ``(i, r, j)`` edges."""

    vocab: RelationVocab
    objects: tuple[SceneObject, ...]
    edges: tuple[Edge, ...] = ()

    def __post_init__(self):
        objs = _make_objects(self.vocab, self.objects)
        n = len(objs)
        edges = tuple(sorted({_check_edge(self.vocab, n, e) for e in self.edges}))
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "edges", edges)

    @property
    def num_nodes(self) -> int:
        return len(self.objects)

    @property
    def categories(self) -> list[int]:
        return [o.category for o in self.objects]

    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)

    def with_edges(self, edges: Iterable[Edge]) -> "SceneGraph":
        return SceneGraph(self.vocab, self.objects, tuple(edges))

    def add_edges(self, edges: Iterable[Edge]) -> "SceneGraph":
        return self.with_edges(list(self.edges) + list(edges))

    def adjacency(self) -> np.ndarray:
        """Boolean tensor ``A[r, i, j]``."""
        a = np.zeros((self.vocab.num_relations, self.num_nodes, self.num_nodes), dtype=bool)
        if self.edges:
            e = np.asarray(self.edges, dtype=np.int64)
            a[e[:, 1], e[:, 0], e[:, 2]] = True
        return a

    @classmethod
    def from_adjacency(cls, vocab, objects, adj: np.ndarray) -> "SceneGraph":
        objs = _make_objects(vocab, objects)
        n = len(objs)
        adj = np.asarray(adj, dtype=bool)
        if adj.shape != (vocab.num_relations, n, n):
            raise ShapeError(f"adjacency must be {(vocab.num_relations, n, n)}, got {adj.shape}")
        if n and adj[:, np.arange(n), np.arange(n)].any():
            raise ShapeError("self-loops are not allowed")
        i, r, j = np.nonzero(adj.transpose(1, 0, 2))
        g = object.__new__(cls)
        object.__setattr__(g, "vocab", vocab)
        object.__setattr__(g, "objects", objs)
        object.__setattr__(g, "edges", tuple(zip(i.tolist(), r.tolist(), j.tolist())))
        return g


@dataclass(frozen=True)
class WeightedSceneGraph:
    """Scene graph whose edges carry weights in (0, 1]."""

    vocab: RelationVocab
    objects: tuple[SceneObject, ...]
    edges: tuple[Edge, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        objs = _make_objects(self.vocab, self.objects)
        n = len(objs)
        if len(self.edges) != len(self.weights):
            raise ShapeError("edges and weights differ in length")
        table: dict[Edge, float] = {}
        for e, w in zip(self.edges, self.weights):
            e = _check_edge(self.vocab, n, e)
            w = float(w)
            if not 0.0 < w <= 1.0:
                raise ShapeError(f"edge weight {w} outside (0, 1]")
            if e in table:
                raise ShapeError(f"duplicate weighted edge {e}")
            table[e] = w
        keys = sorted(table)
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "edges", tuple(keys))
        object.__setattr__(self, "weights", tuple(table[k] for k in keys))

    @property
    def num_nodes(self) -> int:
        return len(self.objects)

    @property
    def categories(self) -> list[int]:
        return [o.category for o in self.objects]

    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)

    def as_dict(self) -> dict[Edge, float]:
        return dict(zip(self.edges, self.weights))

    def unweighted(self) -> SceneGraph:
        return SceneGraph(self.vocab, self.objects, self.edges)

    @classmethod
    def from_mapping(cls, vocab, objects, table: Mapping[Edge, float]) -> "WeightedSceneGraph":
        keys = sorted(table)
        return cls(vocab, objects, tuple(keys), tuple(table[k] for k in keys))

    @classmethod
    def from_dense(cls, vocab, objects, weights: np.ndarray) -> "WeightedSceneGraph":
        """From ``W[r, i, j]`` with 0 marking absent edges; checks are vectorized."""
        objs = _make_objects(vocab, objects)
        n = len(objs)
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (vocab.num_relations, n, n):
            raise ShapeError(f"weights must be {(vocab.num_relations, n, n)}, got {w.shape}")
        if np.any(w < 0.0) or np.any(w > 1.0) or not np.all(np.isfinite(w)):
            raise ShapeError("edge weights must lie in (0, 1]")
        if n and w[:, np.arange(n), np.arange(n)].any():
            raise ShapeError("self-loops are not allowed")
        wt = w.transpose(1, 0, 2)
        i, r, j = np.nonzero(wt)
        g = object.__new__(cls)
        object.__setattr__(g, "vocab", vocab)
        object.__setattr__(g, "objects", objs)
        object.__setattr__(g, "edges", tuple(zip(i.tolist(), r.tolist(), j.tolist())))
        object.__setattr__(g, "weights", tuple(wt[i, r, j].tolist()))
        return g

    @classmethod
    def from_graph(cls, g: SceneGraph) -> "WeightedSceneGraph":
        return cls(g.vocab, g.objects, g.edges, (1.0,) * len(g.edges))


AnyGraph = Union[SceneGraph, WeightedSceneGraph]


class Layout:
    """Per-node boxes ``(x0, y0, x1, y1)`` in normalized image coordinates."""

    __slots__ = ("boxes",)

    def __init__(self, boxes):
        b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(b)) or b.size and (b.min() < 0.0 or b.max() > 1.0):
            raise ShapeError("layout coordinates must lie in [0, 1]")
        b.setflags(write=False)
        self.boxes = b

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and np.array_equal(self.boxes, other.boxes)

    def __repr__(self) -> str:
        return f"Layout({self.boxes.tolist()})"

    def check_nodes(self, g: AnyGraph) -> None:
        if len(self) != g.num_nodes:
            raise ShapeError(f"layout has {len(self)} boxes for {g.num_nodes} nodes")


@dataclass(frozen=True)
class RelationGraph:
    """Unlabeled directed graph: the edges of one relation."""

    num_nodes: int
    arcs: tuple[tuple[int, int], ...] = field(default=())

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for i, j in self.arcs:
            a[i, j] = True
        return a


def per_relation_subgraph(g: AnyGraph, r: int) -> RelationGraph:
    g.vocab.check_relation(r)
    return RelationGraph(g.num_nodes, tuple((i, j) for i, rr, j in g.edges if rr == r))


# --- JSON lines -------------------------------------------------------------

Record = tuple[AnyGraph, "Layout | None"]


def record_to_json(graph: AnyGraph, layout: Layout | None = None) -> dict:
    vocab = graph.vocab
    objects = [
        {"category": vocab.categories[o.category], "attributes": dict(o.attributes)}
        for o in graph.objects
    ]
    if isinstance(graph, WeightedSceneGraph):
        edges = [[i, vocab.relations[r], j, w] for (i, r, j), w in zip(graph.edges, graph.weights)]
    else:
        edges = [[i, vocab.relations[r], j] for i, r, j in graph.edges]
    rec = {"objects": objects, "edges": edges}
    if layout is not None:
        layout.check_nodes(graph)
        rec["boxes"] = layout.boxes.tolist()
    return rec


def record_from_json(vocab: RelationVocab, rec) -> Record:
    if not isinstance(rec, dict) or "objects" not in rec or "edges" not in rec:
        raise ParseError("record needs 'objects' and 'edges'")
    objects = []
    for o in rec["objects"]:
        if not isinstance(o, dict) or "category" not in o:
            raise ParseError("object needs a 'category'")
        objects.append(SceneObject(vocab.category_id(o["category"]), o.get("attributes", {})))
    triples, weights, weighted = [], [], None
    for e in rec["edges"]:
        if not isinstance(e, list) or len(e) not in (3, 4):
            raise ParseError(f"edge must be [i, relation, j] or [i, relation, j, w], got {e!r}")
        if weighted is None:
            weighted = len(e) == 4
        elif weighted != (len(e) == 4):
            raise ParseError("mixed weighted and unweighted edges")
        if not isinstance(e[0], int) or not isinstance(e[2], int):
            raise ParseError(f"edge endpoints must be integers, got {e!r}")
        triples.append((e[0], vocab.relation_id(e[1]), e[2]))
        if weighted:
            weights.append(e[3])
    if weighted:
        graph: AnyGraph = WeightedSceneGraph(vocab, tuple(objects), tuple(triples), tuple(weights))
    else:
        graph = SceneGraph(vocab, tuple(objects), tuple(triples))
    layout = None
    if rec.get("boxes") is not None:
        layout = Layout(rec["boxes"])
        layout.check_nodes(graph)
    return graph, layout


def dumps_record(graph: AnyGraph, layout: Layout | None = None) -> str:
    return json.dumps(record_to_json(graph, layout), sort_keys=True, separators=(",", ":"))


def iter_graphs(path, vocab: RelationVocab) -> Iterator[Record]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            try:
                yield record_from_json(vocab, rec)
            except ParseError as exc:
                if exc.line is None:
                    raise ParseError(str(exc), lineno) from None
                raise
            except VocabularyError as exc:
                raise VocabularyError(f"line {lineno}: {exc}") from None
            except (ShapeError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), lineno) from None


def read_graphs(path, vocab: RelationVocab) -> list[Record]:
    return list(iter_graphs(path, vocab))


def write_graphs(path, records: Sequence) -> None:
    """Write ``(graph, layout_or_None)`` pairs (or bare graphs), one per line."""
    with open(path, "w") as fh:
        for rec in records:
            graph, layout = rec if isinstance(rec, tuple) else (rec, None)
            fh.write(dumps_record(graph, layout))
            fh.write("\n")
