"""Scene-graph canonicalization.

Exact closure (``sgc``) under transitive and converse formulas, a brute-force
fixed-point oracle for it, and the two weighted variants whose relation
properties are learnable probabilities: ``wsgc_e`` (max-product path
completion, differentiable through the maximizing path) and ``wsgc_s``
(sampled converses, unit-weight transitive closure scaled by p_trans).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConsistencyError, DomainError, ParseError, ShapeError, SizeError, VocabularyError
from .sg_core import Edge, RelationVocab, SceneGraph, WeightedSceneGraph

PRUNE_EPS = 1e-4
ORACLE_MAX_NODES = 12


@dataclass(frozen=True)
class FormulaSet:
    transitive: frozenset[int] = frozenset()
    converse: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "transitive", frozenset(int(r) for r in self.transitive))
        object.__setattr__(
            self, "converse", frozenset((int(a), int(b)) for a, b in self.converse)
        )

    def check(self, num_relations: int) -> None:
        ids = set(self.transitive)
        for a, b in self.converse:
            ids.update((a, b))
        for r in ids:
            if not 0 <= r < num_relations:
                raise VocabularyError(f"formula references relation id {r}")

    def is_consistent(self) -> bool:
        """True when converse pairs form a symmetric matching whose partners
        agree on transitivity.  For such sets one converse pass followed by
        one transitive pass already reaches the closure."""
        partner: dict[int, int] = {}
        for a, b in self.converse:
            if (b, a) not in self.converse:
                return False
            if partner.setdefault(a, b) != b:
                return False
            if (a in self.transitive) != (b in self.transitive):
                return False
        return True

    @classmethod
    def from_names(cls, vocab: RelationVocab, transitive=(), converse=()) -> "FormulaSet":
        return cls(
            frozenset(vocab.relation_id(n) for n in transitive),
            frozenset((vocab.relation_id(a), vocab.relation_id(b)) for a, b in converse),
        )

    def to_json(self, vocab: RelationVocab) -> dict:
        return {
            "transitive": [vocab.relations[r] for r in sorted(self.transitive)],
            "converse": [[vocab.relations[a], vocab.relations[b]] for a, b in sorted(self.converse)],
        }

    @classmethod
    def from_json(cls, vocab: RelationVocab, d: Mapping) -> "FormulaSet":
        return cls.from_names(vocab, d.get("transitive", ()), [tuple(p) for p in d.get("converse", ())])


def load_formulas(path, vocab: RelationVocab) -> FormulaSet:
    with open(path) as fh:
        return FormulaSet.from_json(vocab, json.load(fh))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax_rows(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CanonParams:
    """Learnable relation properties.

    ``theta_conv`` has one row per relation and ``R + 1`` columns; the last
    column scores the empty relation ("no converse").  The square part is
    kept symmetric: entries ``[r, r']`` and ``[r', r]`` are one parameter.
    """

    theta_trans: np.ndarray
    theta_conv: np.ndarray

    def __post_init__(self):
        self.theta_trans = np.array(self.theta_trans, dtype=np.float64).reshape(-1)
        self.theta_conv = np.array(self.theta_conv, dtype=np.float64)
        R = self.theta_trans.shape[0]
        if self.theta_conv.shape != (R, R + 1):
            raise ShapeError(f"theta_conv must be {(R, R + 1)}, got {self.theta_conv.shape}")
        if not (np.all(np.isfinite(self.theta_trans)) and np.all(np.isfinite(self.theta_conv))):
            raise DomainError("canonicalization parameters must be finite")
        sq = self.theta_conv[:, :R]
        if not np.array_equal(sq, sq.T):
            raise DomainError("theta_conv relation block must be symmetric")

    @property
    def num_relations(self) -> int:
        return self.theta_trans.shape[0]

    @classmethod
    def init(cls, num_relations: int, phi_init: float = 2.0, trans_init: float = 0.0) -> "CanonParams":
        conv = np.zeros((num_relations, num_relations + 1))
        conv[:, -1] = phi_init
        return cls(np.full(num_relations, trans_init), conv)

    @classmethod
    def saturated(cls, formulas: FormulaSet, num_relations: int, scale: float = 50.0) -> "CanonParams":
        """Parameters whose probabilities round to exactly 0/1 in double precision."""
        formulas.check(num_relations)
        if any((b, a) not in formulas.converse for a, b in formulas.converse):
            raise ValueError("converse pairs must be symmetric to be representable")
        trans = np.where(np.isin(np.arange(num_relations), sorted(formulas.transitive)), scale, -scale)
        conv = np.full((num_relations, num_relations + 1), -scale)
        conv[:, -1] = scale
        for a, b in sorted(formulas.converse):
            if conv[a, -1] < 0 and conv[a, b] < 0:
                raise ValueError(f"relation {a} has more than one converse")
            conv[a, b] = conv[b, a] = scale
            conv[a, -1] = conv[b, -1] = -scale
        return cls(trans, conv)

    def copy(self) -> "CanonParams":
        return CanonParams(self.theta_trans.copy(), self.theta_conv.copy())

    def symmetrize(self) -> None:
        R = self.num_relations
        sq = self.theta_conv[:, :R]
        self.theta_conv[:, :R] = 0.5 * (sq + sq.T)

    def p_trans_all(self) -> np.ndarray:
        return _sigmoid(self.theta_trans)

    def p_conv_all(self) -> np.ndarray:
        return _softmax_rows(self.theta_conv)

    def formulas(self, threshold: float = 0.5) -> FormulaSet:
        pt = self.p_trans_all()
        pc = self.p_conv_all()
        R = self.num_relations
        conv = {(r, int(np.argmax(pc[r]))) for r in range(R) if pc[r].max() > threshold}
        return FormulaSet(
            frozenset(int(r) for r in np.nonzero(pt > threshold)[0]),
            frozenset((a, b) for a, b in conv if b < R),
        )

    def to_json(self) -> dict:
        return {"theta_trans": self.theta_trans.tolist(), "theta_conv": self.theta_conv.tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "CanonParams":
        try:
            return cls(d["theta_trans"], d["theta_conv"])
        except KeyError as exc:
            raise ParseError(f"params file missing {exc}") from None


def load_params(path) -> CanonParams:
    with open(path) as fh:
        return CanonParams.from_json(json.load(fh))


def save_params(params: CanonParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_json()) + "\n")


def p_trans(params: CanonParams, r: int) -> float:
    if not 0 <= r < params.num_relations:
        raise VocabularyError(f"relation id {r} out of range")
    return float(_sigmoid(params.theta_trans[r]))


def p_conv(params: CanonParams, r: int) -> np.ndarray:
    """Distribution over converse candidates; index ``R`` is the empty relation."""
    if not 0 <= r < params.num_relations:
        raise VocabularyError(f"relation id {r} out of range")
    return _softmax_rows(params.theta_conv[r])


def tie_conv_grad(g: np.ndarray) -> np.ndarray:
    """Fold the gradient of the two tied entries into one shared value."""
    R = g.shape[0]
    out = g.copy()
    sq = g[:, :R]
    out[:, :R] = sq + sq.T - np.diag(np.diag(sq))
    return out


# --- exact closure -----------------------------------------------------------


def transitive_closure(adj: np.ndarray) -> np.ndarray:
    """Boolean Floyd-Warshall; the diagonal is cleared (no reflexive edges)."""
    reach = np.array(adj, dtype=bool, copy=True)
    for k in range(reach.shape[0]):
        col = reach[:, k]
        if col.any():
            reach |= np.outer(col, reach[k])
    np.fill_diagonal(reach, False)
    return reach


def _closure_adjacency(adj: np.ndarray, f: FormulaSet) -> np.ndarray:
    adj = adj.copy()
    conv = sorted(f.converse)
    trans = sorted(f.transitive)
    while True:
        before = adj.copy()
        for a, b in conv:
            adj[b] |= adj[a].T
        for r in trans:
            adj[r] = transitive_closure(adj[r])
        if np.array_equal(adj, before):
            return adj


def sgc(g: SceneGraph, f: FormulaSet) -> SceneGraph:
    """Exact canonicalization: the closure of ``g`` under ``f``.

    Converse completion then per-relation transitive closure, repeated until
    nothing changes.  For consistent formula sets the loop exits after one
    productive round.
    """
    f.check(g.vocab.num_relations)
    closed = _closure_adjacency(g.adjacency(), f)
    return SceneGraph.from_adjacency(g.vocab, g.objects, closed)


def closure_oracle(g: SceneGraph, f: FormulaSet) -> SceneGraph:
    """Naive forward chaining of both rule schemas to a fixed point."""
    if g.num_nodes > ORACLE_MAX_NODES:
        raise SizeError(f"closure_oracle is limited to {ORACLE_MAX_NODES} nodes")
    f.check(g.vocab.num_relations)
    facts = set(g.edges)
    changed = True
    while changed:
        changed = False
        new = set()
        for i, r, j in facts:
            for a, b in f.converse:
                if a == r:
                    new.add((j, b, i))
            if r in f.transitive:
                for i2, r2, k in facts:
                    if r2 == r and i2 == j and k != i:
                        new.add((i, r, k))
        if not new <= facts:
            facts |= new
            changed = True
    return g.with_edges(facts)


# --- max-product paths -------------------------------------------------------


@dataclass
class MaxProductPaths:
    best: np.ndarray
    mid: np.ndarray

    def path(self, i: int, j: int) -> list[int]:
        """Node sequence of the stored maximizing path from i to j."""
        if i == j:
            return [i]
        if self.best[i, j] <= 0.0:
            raise ValueError(f"no path {i}->{j}")
        k = int(self.mid[i, j])
        if k < 0:
            return [i, j]
        return self.path(i, k)[:-1] + self.path(k, j)


def max_product_paths(weights, n: int | None = None) -> MaxProductPaths:
    """All-pairs maximum product of edge weights.

    ``weights`` is an ``n x n`` matrix (0 marks a missing arc) or a mapping
    ``{(i, j): w}`` together with ``n``.  Floyd-Warshall runs on ``-log w``;
    the product table is carried alongside so ``best`` holds exact products
    along the selected path.  Ties keep the first intermediate node found.
    """
    if isinstance(weights, Mapping):
        if n is None:
            raise ValueError("n is required with an arc mapping")
        w = np.zeros((n, n))
        for (i, j), x in weights.items():
            if not x > 0.0:
                raise DomainError(f"arc {(i, j)} has nonpositive weight {x}")
            w[i, j] = x
    else:
        w = np.array(weights, dtype=np.float64)
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise DomainError("weights must be finite and nonnegative (0 = no arc)")
    if np.any(w > 1.0):
        raise DomainError("weights must lie in (0, 1]")
    n = w.shape[0]
    with np.errstate(divide="ignore"):
        dist = -np.log(w)
    prod = w.copy()
    np.fill_diagonal(dist, 0.0)
    np.fill_diagonal(prod, 1.0)
    mid = np.full((n, n), -1, dtype=np.int64)
    for k in range(n):
        via = dist[:, k, None] + dist[None, k, :]
        better = via < dist
        if better.any():
            dist = np.where(better, via, dist)
            prod = np.where(better, prod[:, k, None] * prod[None, k, :], prod)
            mid[better] = k
    return MaxProductPaths(prod, mid)


# --- WSGC-E ------------------------------------------------------------------

# provenance codes for ExactTrace.kind
ORIGINAL, CONVERSE, TRANSITIVE = 0, 1, 2


@dataclass
class ExactTrace:
    """What ``subgrad_wsgc_e`` needs: where every output weight came from."""

    edges: tuple[Edge, ...]
    kind: list[int]
    source: list[int]  # converse: relation of the generating edge
    paths: list[tuple[Edge, ...]]  # transitive: hops of the maximizing path
    hop_source: dict[Edge, int]  # post-converse edge -> generating relation (-1 original)
    theta_trans: np.ndarray
    theta_conv: np.ndarray


def wsgc_e(
    g: SceneGraph,
    params: CanonParams,
    eps: float = PRUNE_EPS,
    return_trace: bool = False,
):
    R = g.vocab.num_relations
    if params.num_relations != R:
        raise ShapeError("params and vocabulary disagree on relation count")
    n = g.num_nodes
    pc = params.p_conv_all()
    pt = params.p_trans_all()

    w = np.zeros((R, n, n))
    src = np.full((R, n, n), -2, dtype=np.int64)
    for i, r, j in g.edges:
        w[r, i, j] = 1.0
        src[r, i, j] = -1
    for i, r, j in g.edges:
        for r2 in range(R):
            x = pc[r, r2]
            if x >= eps and x > w[r2, j, i]:
                w[r2, j, i] = x
                src[r2, j, i] = r

    table: dict[Edge, float] = {}
    kind: dict[Edge, int] = {}
    source: dict[Edge, int] = {}
    paths: dict[Edge, tuple[Edge, ...]] = {}
    hop_source: dict[Edge, int] = {}
    for r, i, j in zip(*np.nonzero(w)):
        e = (int(i), int(r), int(j))
        table[e] = float(w[r, i, j])
        s = int(src[r, i, j])
        hop_source[e] = s
        kind[e] = ORIGINAL if s < 0 else CONVERSE
        source[e] = s

    for r in range(R):
        if pt[r] < eps or not w[r].any():
            continue
        mp = max_product_paths(w[r])
        cand = pt[r] * mp.best
        np.fill_diagonal(cand, 0.0)
        ii, jj = np.nonzero((cand >= eps) & (cand > w[r]))
        for i, j in zip(ii.tolist(), jj.tolist()):
            e = (i, r, j)
            nodes = mp.path(i, j)
            hops = tuple((a, r, b) for a, b in zip(nodes[:-1], nodes[1:]))
            table[e] = float(cand[i, j])
            kind[e] = TRANSITIVE
            source[e] = -1
            paths[e] = hops

    wg = WeightedSceneGraph.from_mapping(g.vocab, g.objects, table)
    if not return_trace:
        return wg
    trace = ExactTrace(
        edges=wg.edges,
        kind=[kind[e] for e in wg.edges],
        source=[source[e] for e in wg.edges],
        paths=[paths.get(e, ()) for e in wg.edges],
        hop_source=hop_source,
        theta_trans=params.theta_trans.copy(),
        theta_conv=params.theta_conv.copy(),
    )
    return wg, trace


def subgrad_wsgc_e(
    params: CanonParams, trace: ExactTrace, upstream
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients on (theta_trans, theta_conv) given d loss / d weight per output edge.

    Differentiates each transitive weight along its stored maximizing path;
    converse weights go through the softmax Jacobian.  The returned
    ``theta_conv`` gradient already has tied entries summed.
    """
    if not (
        np.array_equal(trace.theta_trans, params.theta_trans)
        and np.array_equal(trace.theta_conv, params.theta_conv)
    ):
        raise ConsistencyError("trace was recorded with different parameters")
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if up.shape[0] != len(trace.edges):
        raise ConsistencyError("upstream gradient does not match traced edges")
    R = params.num_relations
    pc = params.p_conv_all()
    pt = params.p_trans_all()
    g_trans = np.zeros(R)
    g_conv = np.zeros((R, R + 1))

    def conv_weight_grad(rel: int, s: int, gw: float) -> None:
        # weight = pc[s, rel]; d/dtheta[s, k] = p_rel (delta_{k,rel} - p_k)
        p = pc[s]
        row = -p[rel] * p
        row[rel] += p[rel]
        g_conv[s] += gw * row

    for e, kd, s, hops, gw in zip(trace.edges, trace.kind, trace.source, trace.paths, up):
        if gw == 0.0 or kd == ORIGINAL:
            continue
        r = e[1]
        if kd == CONVERSE:
            conv_weight_grad(r, s, gw)
            continue
        hop_w = []
        for h in hops:
            hs = trace.hop_source[h]
            hop_w.append(1.0 if hs < 0 else pc[hs, h[1]])
        prod = float(np.prod(hop_w))
        g_trans[r] += gw * pt[r] * (1.0 - pt[r]) * prod
        for idx, h in enumerate(hops):
            hs = trace.hop_source[h]
            if hs < 0:
                continue
            others = float(np.prod(hop_w[:idx] + hop_w[idx + 1:]))
            conv_weight_grad(h[1], hs, gw * pt[r] * others)
    return g_trans, tie_conv_grad(g_conv)


# --- WSGC-S ------------------------------------------------------------------


@dataclass
class SampleRecord:
    """One draw of converse variables, one per original edge."""

    edges: tuple[Edge, ...]
    z: np.ndarray  # sampled column index; R means "no converse"
    log_prob: np.ndarray
    probs: np.ndarray  # p_conv rows used for each draw
    trans_relation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # per output edge: relation id if the edge was added transitively, else -1


def sample_converses(g: SceneGraph, params: CanonParams, rng: np.random.Generator) -> SampleRecord:
    R = params.num_relations
    if g.vocab.num_relations != R:
        raise ShapeError("params and vocabulary disagree on relation count")
    rels = np.array([e[1] for e in g.edges], dtype=np.int64)
    probs = params.p_conv_all()[rels] if len(rels) else np.zeros((0, R + 1))
    u = rng.random(len(rels))
    cum = np.cumsum(probs, axis=1)
    z = np.minimum((cum <= u[:, None]).sum(axis=1), R).astype(np.int64)
    logp = np.log(probs[np.arange(len(rels)), z]) if len(rels) else np.zeros(0)
    return SampleRecord(g.edges, z, logp, probs)


def complete_sampled(
    g: SceneGraph, params: CanonParams, sample: SampleRecord, eps: float = PRUNE_EPS
) -> tuple[WeightedSceneGraph, SampleRecord]:
    """Deterministic part of WSGC-S given the converse draws."""
    if sample.edges != g.edges:
        raise ConsistencyError("sample was drawn for a different graph")
    R = params.num_relations
    adj = g.adjacency()
    for (i, r, j), z in zip(g.edges, sample.z.tolist()):
        if z < R:
            adj[z, j, i] = True
    pt = params.p_trans_all()
    w = adj.astype(np.float64)
    added = np.zeros_like(adj)
    for r in range(R):
        if pt[r] < eps or not adj[r].any():
            continue
        new = transitive_closure(adj[r]) & ~adj[r]
        w[r][new] = pt[r]
        added[r] = new
    wg = WeightedSceneGraph.from_dense(g.vocab, g.objects, w)
    # same (i, r, j) order as wg.edges
    i, r, j = np.nonzero(w.transpose(1, 0, 2))
    trans_rel = np.where(added[r, i, j], r, -1).astype(np.int64)
    rec = SampleRecord(sample.edges, sample.z, sample.log_prob, sample.probs, trans_rel)
    return wg, rec


def wsgc_s(
    g: SceneGraph, params: CanonParams, rng: np.random.Generator, eps: float = PRUNE_EPS
) -> tuple[WeightedSceneGraph, SampleRecord]:
    return complete_sampled(g, params, sample_converses(g, params, rng), eps)


def wsgc_s_trans_grad(params: CanonParams, sample: SampleRecord, upstream) -> np.ndarray:
    """Pathwise gradient on theta_trans: transitive edges carry weight p_trans(r)."""
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if up.shape[0] != sample.trans_relation.shape[0]:
        raise ConsistencyError("upstream gradient does not match sampled graph")
    R = params.num_relations
    mask = sample.trans_relation >= 0
    per_rel = np.bincount(sample.trans_relation[mask], weights=up[mask], minlength=R)
    pt = params.p_trans_all()
    return per_rel * pt * (1.0 - pt)
