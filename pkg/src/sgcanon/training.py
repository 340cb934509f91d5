"""End-to-end training: canonicalize -> weighted GCN -> L1 against boxes.

Gradients reach the GCN by backprop, theta_trans pathwise through the
weights of transitively completed edges, and theta_conv either by the
score-function estimator (``wsgc-s``) or through the maximizing path of
the exact weighted closure (``wsgc-e``).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import canon
from .canon import CanonParams, FormulaSet, SampleRecord
from .errors import ShapeError, TrainingError, ValidationError
from .metrics import EvalResult, evaluate
from .neural import AdamState, GcnModel, adam_step, forward_packed, gcn_backward, pack
from .sg_core import Layout, RelationVocab, SceneGraph, WeightedSceneGraph

log = logging.getLogger(__name__)

MODES = ("baseline", "sgc-known", "wsgc-s", "wsgc-e")


@dataclass
class TrainConfig:
    mode: str = "wsgc-s"
    layers: int = 5
    dim: int = 128
    hidden: int = 512
    epochs: int = 200
    batch_size: int = 32
    lr_canon: float = 1e-2
    lr_gcn: float = 1e-4
    seed: int = 0
    patience: int = 10
    reinforce_baseline: bool | str = False  # False, True/"batch" (one running mean) or "scene" (one per scene)
    baseline_decay: float = 0.9
    formulas: dict | None = None  # {"transitive": [...], "converse": [[a, b], ...]}
    phi_init: float = 2.0
    prune_eps: float = canon.PRUNE_EPS
    # dataset wiring for the CLI
    vocab_path: str | None = None
    train_path: str | None = None
    val_path: str | None = None
    synth: dict | None = None
    train_count: int = 512
    val_count: int = 128

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_canon <= 0 or self.lr_gcn <= 0:
            raise ValidationError("learning rates must be positive")
        if self.mode == "sgc-known" and self.formulas is None:
            raise ValidationError("mode sgc-known needs a formula set")
        if self.reinforce_baseline not in (False, True, "batch", "scene"):
            raise ValidationError("reinforce_baseline must be false, true, 'batch' or 'scene'")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValidationError("baseline_decay must lie in [0, 1)")
        if self.layers < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("layers and batch_size must be positive, epochs non-negative")

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    miou: list[float] = field(default_factory=list)
    r03: list[float] = field(default_factory=list)
    r05: list[float] = field(default_factory=list)
    p_trans: list[list[float]] = field(default_factory=list)
    p_conv: list[list[list[float]]] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def record(self, loss: float, ev: EvalResult, params: CanonParams) -> None:
        self.loss.append(float(loss))
        self.miou.append(ev.miou)
        self.r03.append(ev.r03)
        self.r05.append(ev.r05)
        self.p_trans.append(params.p_trans_all().tolist())
        self.p_conv.append(params.p_conv_all().tolist())

    def write_csv(self, path, vocab: RelationVocab) -> None:
        names = list(vocab.relations)
        conv_cols = [(a, b) for a in names for b in names + ["phi"]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["epoch", "loss", "miou", "r03", "r05"]
                + [f"p_trans[{n}]" for n in names]
                + [f"p_conv[{b}|{a}]" for a, b in conv_cols]
            )
            for k in range(self.epochs):
                pc = np.asarray(self.p_conv[k]).reshape(-1).tolist()
                w.writerow(
                    [k, self.loss[k], self.miou[k], self.r03[k], self.r05[k]] + self.p_trans[k] + pc
                )

    def summary(self) -> dict:
        k = self.best_epoch
        return {
            "epochs": self.epochs,
            "best_epoch": k,
            "stopped_early": self.stopped_early,
            "best_val": None if k < 0 else {"miou": self.miou[k], "r03": self.r03[k], "r05": self.r05[k]},
            "final_p_trans": self.p_trans[-1] if self.epochs else None,
            "final_p_conv": self.p_conv[-1] if self.epochs else None,
        }


def l1_loss(pred, gt) -> float:
    """Mean absolute difference over all 4n coordinates."""
    p = pred.boxes if isinstance(pred, Layout) else np.asarray(pred, dtype=np.float64)
    g = gt.boxes if isinstance(gt, Layout) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"layout shapes differ: {p.shape} vs {g.shape}")
    if p.size == 0:
        return 0.0
    return float(np.abs(p - g).mean())


def reinforce_grad(sample: SampleRecord, reward: float) -> np.ndarray:
    """Score-function gradient ``reward * sum_e grad log p_conv(Z_e | r_e)``.

    Rows of the result follow theta_conv; tied entries are already summed.
    """
    probs = sample.probs
    R = probs.shape[1] - 1
    g = np.zeros((R, R + 1))
    if len(sample.edges) == 0 or reward == 0.0:
        return g
    rels = np.array([e[1] for e in sample.edges], dtype=np.int64)
    score = -probs.copy()
    score[np.arange(len(rels)), sample.z] += 1.0
    np.add.at(g, rels, score)
    return canon.tie_conv_grad(reward * g)


# --- pipeline ------------------------------------------------------------------


@dataclass
class _Canonicalized:
    graph: WeightedSceneGraph
    sample: SampleRecord | None = None
    trace: canon.ExactTrace | None = None


class Pipeline:
    """Canonicalization for one mode, with caching where the output is fixed."""

    def __init__(self, mode: str, vocab: RelationVocab, formulas: FormulaSet | None, eps: float):
        self.mode = mode
        self.vocab = vocab
        self.formulas = formulas
        self.eps = eps
        self._cache: dict[int, WeightedSceneGraph] = {}

    def __call__(self, g: SceneGraph, params: CanonParams, rng: np.random.Generator, key=None):
        if self.mode in ("baseline", "sgc-known"):
            if key is not None and key in self._cache:
                return _Canonicalized(self._cache[key])
            h = g if self.mode == "baseline" else canon.sgc(g, self.formulas)
            wg = WeightedSceneGraph.from_graph(h)
            if key is not None:
                self._cache[key] = wg
            return _Canonicalized(wg)
        if self.mode == "wsgc-s":
            wg, rec = canon.wsgc_s(g, params, rng, self.eps)
            return _Canonicalized(wg, sample=rec)
        wg, trace = canon.wsgc_e(g, params, self.eps, return_trace=True)
        return _Canonicalized(wg, trace=trace)


def predict(
    model: GcnModel,
    params: CanonParams,
    graphs: Sequence[SceneGraph],
    pipeline: Pipeline,
    seed: int,
    batch_size: int = 64,
    max_edges: int = 20000,
) -> list[np.ndarray]:
    """Boxes for each graph; sampling (wsgc-s) draws from an rng seeded by ``seed``.

    Batches hold at most ``batch_size`` graphs and, beyond the first graph,
    at most ``max_edges`` canonicalized edges, so large scenes stay in memory.
    """
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    batch: list[WeightedSceneGraph] = []
    edges = 0

    def flush():
        if batch:
            packed = pack(batch)
            boxes, _ = forward_packed(packed, model)
            for k in range(len(batch)):
                out.append(boxes[packed.node_offsets[k]:packed.node_offsets[k + 1]])
            batch.clear()

    for g in graphs:
        h = pipeline(g, params, rng).graph
        if batch and (len(batch) >= batch_size or edges + len(h.edges) > max_edges):
            flush()
            edges = 0
        batch.append(h)
        edges += len(h.edges)
    flush()
    return out


def _split_grad(boxes, gts, packed):
    """Per-graph L1 losses and d(batch loss)/d boxes (per-object, then per-graph mean)."""
    B = packed.num_graphs
    dB = np.zeros_like(boxes)
    losses = np.zeros(B)
    for k in range(B):
        a, b = packed.node_offsets[k], packed.node_offsets[k + 1]
        diff = boxes[a:b] - gts[k]
        if diff.size:
            losses[k] = np.abs(diff).mean()
            dB[a:b] = np.sign(diff) / (diff.size * B)
    return losses, dB


class TrainingAborted(TrainingError):
    def __init__(self, message, model: GcnModel, params: CanonParams):
        super().__init__(message)
        self.model = model
        self.params = params


def train(
    config: TrainConfig,
    train_data: Sequence[tuple[SceneGraph, Layout]],
    val_data: Sequence[tuple[SceneGraph, Layout]],
    vocab: RelationVocab | None = None,
    model: GcnModel | None = None,
    params: CanonParams | None = None,
    on_epoch: Callable[[int, TrainReport], None] | None = None,
) -> tuple[GcnModel, CanonParams, TrainReport]:
    if not train_data or not val_data:
        raise ValidationError("training and validation sets must be non-empty")
    if any(l is None for _, l in train_data) or any(l is None for _, l in val_data):
        raise ValidationError("every scene needs a ground-truth layout")
    vocab = vocab or train_data[0][0].vocab
    formulas = FormulaSet.from_json(vocab, config.formulas) if config.formulas else None
    rng = np.random.default_rng(config.seed)
    # converse draws use their own stream so batch order does not depend on the mode
    sample_rng = np.random.default_rng([config.seed, 1])
    if model is None:
        model = GcnModel.init(
            vocab.num_categories, vocab.num_relations, config.dim, config.hidden, config.layers,
            seed=int(rng.integers(2**31)),
        )
    if params is None:
        params = CanonParams.init(vocab.num_relations, phi_init=config.phi_init)
    pipeline = Pipeline(config.mode, vocab, formulas, config.prune_eps)
    learn_canon = config.mode in ("wsgc-s", "wsgc-e")

    gcn_state, canon_state = AdamState(), AdamState()
    report = TrainReport()
    best = (-np.inf, model.copy(), params.copy())
    stale = 0
    reward_baseline = None
    scene_baseline: dict[int, float] = {}
    per_scene = config.reinforce_baseline == "scene"
    decay = config.baseline_decay
    val_graphs = [g for g, _ in val_data]
    val_gts = [l.boxes for _, l in val_data]
    eval_seed = config.seed + 7919

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_data))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            items = [pipeline(train_data[i][0], params, sample_rng, key=int(i)) for i in idx]
            gts = [train_data[i][1].boxes for i in idx]
            packed = pack([it.graph for it in items])
            boxes, tape = forward_packed(packed, model)
            losses, dB = _split_grad(boxes, gts, packed)
            batch_loss = float(losses.mean())
            if not np.isfinite(batch_loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", best[1], best[2])
            grads, dw = gcn_backward(tape, dB)

            if learn_canon:
                g_trans = np.zeros(vocab.num_relations)
                g_conv = np.zeros((vocab.num_relations, vocab.num_relations + 1))
                for k, it in enumerate(items):
                    dw_k = dw[packed.edge_offsets[k]:packed.edge_offsets[k + 1]]
                    if it.sample is not None:
                        g_trans += canon.wsgc_s_trans_grad(params, it.sample, dw_k)
                        b = scene_baseline.get(int(idx[k]), reward_baseline) if per_scene else reward_baseline
                        reward = losses[k] if b is None else losses[k] - b
                        g_conv += reinforce_grad(it.sample, reward) / len(items)
                    else:
                        gt_k, gc_k = canon.subgrad_wsgc_e(params, it.trace, dw_k)
                        g_trans += gt_k
                        g_conv += gc_k
                if config.reinforce_baseline:
                    m = float(losses.mean())
                    reward_baseline = m if reward_baseline is None else decay * reward_baseline + (1 - decay) * m
                    if per_scene:
                        for k, i in enumerate(idx.tolist()):
                            old = scene_baseline.get(i)
                            scene_baseline[i] = losses[k] if old is None else decay * old + (1 - decay) * losses[k]
                cp = {"theta_trans": params.theta_trans, "theta_conv": params.theta_conv}
                try:
                    adam_step(cp, {"theta_trans": g_trans, "theta_conv": g_conv}, canon_state, config.lr_canon)
                except TrainingError as exc:
                    raise TrainingAborted(str(exc), best[1], best[2]) from None
                params.symmetrize()
            try:
                adam_step(model.params, grads, gcn_state, config.lr_gcn)
            except TrainingError as exc:
                raise TrainingAborted(str(exc), best[1], best[2]) from None
            model.touch()
            epoch_loss += batch_loss * len(idx)
            seen += len(idx)

        preds = predict(model, params, val_graphs, pipeline, eval_seed)
        ev = evaluate(preds, val_gts)
        report.record(epoch_loss / max(seen, 1), ev, params)
        log.info("epoch %d loss %.4f val miou %.4f", epoch, report.loss[-1], ev.miou)
        if on_epoch is not None:
            on_epoch(epoch, report)
        if ev.miou > best[0]:
            best = (ev.miou, model.copy(), params.copy())
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stopped_early = True
                break
    if report.best_epoch >= 0:
        model, params = best[1], best[2]
    return model, params, report


def load_train_data(config: TrainConfig):
    """Datasets named by a config: files, or synthetic scenes generated on the fly."""
    from .sg_core import load_vocab
    from .sg_data import SynthConfig, load_dataset, synth_generate

    if config.synth is not None:
        sc = SynthConfig.from_json(config.synth)
        train_data = synth_generate(sc, config.train_count)
        val_cfg = SynthConfig.from_json({**sc.to_json(), "seed": sc.seed + 1})
        val_data = synth_generate(val_cfg, config.val_count)
        return train_data[0][0].vocab, train_data, val_data
    if not (config.vocab_path and config.train_path and config.val_path):
        raise ValidationError("config needs vocab_path/train_path/val_path or a synth section")
    vocab = load_vocab(config.vocab_path)
    return vocab, load_dataset(config.train_path, vocab), load_dataset(config.val_path, vocab)


def save_run(out_dir, model: GcnModel, params: CanonParams, report: TrainReport, vocab, config) -> None:
    from .neural import save_model

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json", {"canon_params": params.to_json(), "vocab": vocab.to_dict()})
    report.write_csv(out / "report.csv", vocab)
    summary = report.summary()
    summary["config"] = asdict(config)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
