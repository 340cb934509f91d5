"""Weighted graph-convolutional layout predictor with hand-written backprop.

Each layer runs one shared MLP over (subject, relation, object) triples and
splits its output into F_s, F_r, F_o.  Node states become the weight-averaged
F_s/F_o messages of incident edges; edge states are refreshed from F_r
evaluated on the *updated* endpoint states.  A sigmoid box head reads the
final node states.  Batches are disjoint unions of graphs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ConsistencyError, ParseError, ShapeError, TrainingError
from .sg_core import AnyGraph, Layout, WeightedSceneGraph

CHECKPOINT_FORMAT = "sgcanon-gcn"
CHECKPOINT_VERSION = 1


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class GcnModel:
    """Parameters live in ``self.params``, an ordered name -> array dict."""

    def __init__(self, params: dict[str, np.ndarray], dim: int, hidden: int, layers: int):
        self.params = params
        self.dim = dim
        self.hidden = hidden
        self.layers = layers
        self.version = 0

    @classmethod
    def init(
        cls,
        num_categories: int,
        num_relations: int,
        dim: int = 128,
        hidden: int = 512,
        layers: int = 5,
        seed: int = 0,
    ) -> "GcnModel":
        rng = np.random.default_rng(seed)
        D, H = dim, hidden
        p = {
            "obj_emb": _glorot(rng, 1, D, (num_categories, D)),
            "rel_emb": _glorot(rng, 1, D, (num_relations, D)),
        }
        for t in range(layers):
            p[f"g{t}.W1"] = _glorot(rng, 3 * D, H)
            p[f"g{t}.b1"] = np.zeros(H)
            p[f"g{t}.W2"] = _glorot(rng, H, H)
            p[f"g{t}.b2"] = np.zeros(H)
            p[f"g{t}.W3"] = _glorot(rng, H, 3 * D)
            p[f"g{t}.b3"] = np.zeros(3 * D)
        p["box.W1"] = _glorot(rng, D, H)
        p["box.b1"] = np.zeros(H)
        p["box.W2"] = _glorot(rng, H, 4)
        p["box.b2"] = np.zeros(4)
        return cls(p, D, H, layers)

    @property
    def num_categories(self) -> int:
        return self.params["obj_emb"].shape[0]

    @property
    def num_relations(self) -> int:
        return self.params["rel_emb"].shape[0]

    def copy(self) -> "GcnModel":
        m = GcnModel({k: v.copy() for k, v in self.params.items()}, self.dim, self.hidden, self.layers)
        return m

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding tapes."""
        self.version += 1

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dim": self.dim,
            "hidden": self.hidden,
            "layers": self.layers,
            "params": {
                k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                for k, v in self.params.items()
            },
        }

    @classmethod
    def from_json(cls, d: dict) -> "GcnModel":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ParseError("not a version-1 sgcanon GCN checkpoint")
        params = {}
        for k, rec in d["params"].items():
            arr = np.array(rec["data"], dtype=np.float64)
            if arr.size != int(np.prod(rec["shape"])):
                raise ParseError(f"parameter {k} does not match its shape header")
            params[k] = arr.reshape(rec["shape"])
        return cls(params, d["dim"], d["hidden"], d["layers"])


def save_model(model: GcnModel, path, extra: dict | None = None) -> None:
    doc = model.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> tuple[GcnModel, dict]:
    doc = json.loads(Path(path).read_text())
    return GcnModel.from_json(doc), doc


# --- batching ------------------------------------------------------------------


@dataclass
class PackedGraphs:
    categories: np.ndarray
    subj: np.ndarray
    obj: np.ndarray
    rel: np.ndarray
    weight: np.ndarray
    node_offsets: np.ndarray
    edge_offsets: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.categories.shape[0]

    @property
    def num_edges(self) -> int:
        return self.subj.shape[0]

    @property
    def num_graphs(self) -> int:
        return self.node_offsets.shape[0] - 1


def pack(graphs: Sequence[AnyGraph], weights: Sequence[np.ndarray] | None = None) -> PackedGraphs:
    """Disjoint union.  Unweighted graphs get weight 1 on every edge."""
    cats, subj, obj, rel, w = [], [], [], [], []
    node_off, edge_off = [0], [0]
    for k, g in enumerate(graphs):
        base = node_off[-1]
        cats.append(np.asarray(g.categories, dtype=np.int64))
        e = np.asarray(g.edges, dtype=np.int64).reshape(-1, 3)
        subj.append(e[:, 0] + base)
        rel.append(e[:, 1])
        obj.append(e[:, 2] + base)
        if weights is not None:
            w.append(np.asarray(weights[k], dtype=np.float64))
        elif isinstance(g, WeightedSceneGraph):
            w.append(np.asarray(g.weights, dtype=np.float64))
        else:
            w.append(np.ones(len(g.edges)))
        node_off.append(base + g.num_nodes)
        edge_off.append(edge_off[-1] + len(g.edges))
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)
    return PackedGraphs(
        cat(cats, np.int64),
        cat(subj, np.int64),
        cat(obj, np.int64),
        cat(rel, np.int64),
        cat(w, np.float64),
        np.array(node_off, dtype=np.int64),
        np.array(edge_off, dtype=np.int64),
    )


def _incidence(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = index.shape[0]
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


# --- forward / backward ------------------------------------------------------


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class _LayerCache:
    x: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    y: np.ndarray
    v_new: np.ndarray
    x2: np.ndarray | None = None
    a1_2: np.ndarray | None = None
    a2_2: np.ndarray | None = None


@dataclass
class Tape:
    model: GcnModel
    model_version: int
    packed: PackedGraphs
    gs: sp.csr_matrix
    go: sp.csr_matrix
    norm: np.ndarray
    layers: list[_LayerCache] = field(default_factory=list)
    v_final: np.ndarray | None = None
    box_a: np.ndarray | None = None
    boxes: np.ndarray | None = None


def _mlp(p, t, x):
    a1 = x @ p[f"g{t}.W1"] + p[f"g{t}.b1"]
    a2 = _relu(a1) @ p[f"g{t}.W2"] + p[f"g{t}.b2"]
    return a1, a2


def forward_packed(packed: PackedGraphs, model: GcnModel) -> tuple[np.ndarray, Tape]:
    p = model.params
    D = model.dim
    if packed.num_nodes and packed.categories.max() >= model.num_categories:
        raise ShapeError("category id exceeds the model's embedding table")
    if packed.num_edges and packed.rel.max() >= model.num_relations:
        raise ShapeError("relation id exceeds the model's embedding table")
    n = packed.num_nodes
    s, o, w = packed.subj, packed.obj, packed.weight
    gs, go = _incidence(s, n), _incidence(o, n)
    norm = gs @ w + go @ w
    tape = Tape(model, model.version, packed, gs, go, norm)
    has = norm > 0
    inv = np.where(has, 1.0 / np.where(has, norm, 1.0), 0.0)[:, None]

    v = p["obj_emb"][packed.categories]
    u = p["rel_emb"][packed.rel]
    for t in range(model.layers):
        x = np.concatenate([v[s], u, v[o]], axis=1)
        a1, a2 = _mlp(p, t, x)
        y = _relu(a2) @ p[f"g{t}.W3"] + p[f"g{t}.b3"]
        num = gs @ (w[:, None] * y[:, :D]) + go @ (w[:, None] * y[:, 2 * D:])
        v_new = np.where(has[:, None], num * inv, v)
        cache = _LayerCache(x, a1, a2, y, v_new)
        if t < model.layers - 1:
            x2 = np.concatenate([v_new[s], u, v_new[o]], axis=1)
            a1_2, a2_2 = _mlp(p, t, x2)
            u = _relu(a2_2) @ p[f"g{t}.W3"][:, D:2 * D] + p[f"g{t}.b3"][D:2 * D]
            cache.x2, cache.a1_2, cache.a2_2 = x2, a1_2, a2_2
        tape.layers.append(cache)
        v = v_new
    box_a = v @ p["box.W1"] + p["box.b1"]
    z = _relu(box_a) @ p["box.W2"] + p["box.b2"]
    boxes = expit(z)
    tape.v_final, tape.box_a, tape.boxes = v, box_a, boxes
    return boxes, tape


def gcn_forward(g: AnyGraph, model: GcnModel) -> tuple[Layout, Tape]:
    boxes, tape = forward_packed(pack([g]), model)
    return Layout(boxes), tape


def _mlp_backward(p, grads, t, x, a1, a2, dy, cols=slice(None)):
    """Backprop through one MLP evaluation; returns d/dx."""
    W3 = p[f"g{t}.W3"][:, cols]
    h2 = _relu(a2)
    grads[f"g{t}.W3"][:, cols] += h2.T @ dy
    grads[f"g{t}.b3"][cols] += dy.sum(axis=0)
    da2 = (dy @ W3.T) * (a2 > 0)
    grads[f"g{t}.W2"] += _relu(a1).T @ da2
    grads[f"g{t}.b2"] += da2.sum(axis=0)
    da1 = (da2 @ p[f"g{t}.W2"].T) * (a1 > 0)
    grads[f"g{t}.W1"] += x.T @ da1
    grads[f"g{t}.b1"] += da1.sum(axis=0)
    return da1 @ p[f"g{t}.W1"].T


def gcn_backward(tape: Tape, grad_boxes) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients on every model parameter and on every edge weight."""
    model = tape.model
    if tape.model_version != model.version:
        raise ConsistencyError("model changed since this tape was recorded")
    dB = np.asarray(grad_boxes, dtype=np.float64)
    if isinstance(grad_boxes, Layout):
        dB = grad_boxes.boxes
    if dB.shape != tape.boxes.shape:
        raise ConsistencyError(f"box gradient shape {dB.shape} != {tape.boxes.shape}")
    p = model.params
    D = model.dim
    packed = tape.packed
    s, o, w = packed.subj, packed.obj, packed.weight
    gs, go = tape.gs, tape.go
    norm = tape.norm
    has = norm > 0
    inv = np.where(has, 1.0 / np.where(has, norm, 1.0), 0.0)[:, None]
    grads = model.zeros_like()
    dw = np.zeros_like(w)

    bx = tape.boxes
    dz = dB * bx * (1.0 - bx)
    grads["box.W2"] += _relu(tape.box_a).T @ dz
    grads["box.b2"] += dz.sum(axis=0)
    da = (dz @ p["box.W2"].T) * (tape.box_a > 0)
    grads["box.W1"] += tape.v_final.T @ da
    grads["box.b1"] += da.sum(axis=0)
    dv = da @ p["box.W1"].T
    du = np.zeros((packed.num_edges, D))

    for t in reversed(range(model.layers)):
        c = tape.layers[t]
        du_prev = np.zeros_like(du)
        if c.x2 is not None:
            dx2 = _mlp_backward(p, grads, t, c.x2, c.a1_2, c.a2_2, du, slice(D, 2 * D))
            dv = dv + gs @ dx2[:, :D] + go @ dx2[:, 2 * D:]
            du_prev += dx2[:, D:2 * D]
        # v_new = num / norm on nodes with incident edges, identity elsewhere
        dnum = dv * inv
        dnorm = -(dv * c.v_new).sum(axis=1) * inv[:, 0]
        dv_prev = np.where(has[:, None], 0.0, dv)
        y = c.y
        dnum_s, dnum_o = dnum[s], dnum[o]
        dw += (y[:, :D] * dnum_s).sum(axis=1) + (y[:, 2 * D:] * dnum_o).sum(axis=1)
        dw += dnorm[s] + dnorm[o]
        dy = np.zeros_like(y)
        dy[:, :D] = w[:, None] * dnum_s
        dy[:, 2 * D:] = w[:, None] * dnum_o
        dx = _mlp_backward(p, grads, t, c.x, c.a1, c.a2, dy)
        dv_prev = dv_prev + gs @ dx[:, :D] + go @ dx[:, 2 * D:]
        du_prev += dx[:, D:2 * D]
        dv, du = dv_prev, du_prev

    n_cat, n_rel = model.num_categories, model.num_relations
    grads["obj_emb"] += _incidence(packed.categories, n_cat) @ dv
    if packed.num_edges:
        grads["rel_emb"] += _incidence(packed.rel, n_rel) @ du
    return grads, dw


# --- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """In-place Adam update with bias correction; returns (params, state)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, expected {params[k].shape}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state
