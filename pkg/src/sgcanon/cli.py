"""Command-line entry point.

Exit status: 0 on success, 1 on invalid input, 2 on any runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import canon
from .errors import SgCanonError, ValidationError
from .metrics import evaluate
from .sg_core import Layout, RelationVocab, load_vocab, read_graphs, save_vocab, write_graphs

log = logging.getLogger("sgcanon")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _read_boxes(path) -> list[np.ndarray]:
    """Only the ``boxes`` field of each record; no vocabulary needed."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or rec.get("boxes") is None:
                raise ValidationError(f"{path}: line {lineno}: record has no boxes")
            try:
                out.append(Layout(rec["boxes"]).boxes if rec["boxes"] else np.zeros((0, 4)))
            except (ValueError, TypeError) as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from None
    return out


def infer_vocab(path) -> RelationVocab:
    """Categories, relations and attributes in order of first appearance."""
    cats, rels, attrs = {}, {}, {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for o in rec["objects"]:
                    cats.setdefault(o["category"], None)
                    for k, v in (o.get("attributes") or {}).items():
                        attrs.setdefault(k, {}).setdefault(v, None)
                for e in rec["edges"]:
                    rels.setdefault(e[1], None)
            except (json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
                raise ValidationError(f"{path}: line {lineno}: malformed record ({exc})") from None
    return RelationVocab(list(rels), list(cats), {k: list(v) for k, v in attrs.items()})


def _vocab(args, path) -> RelationVocab:
    return load_vocab(args.vocab) if getattr(args, "vocab", None) else infer_vocab(path)


# --- verbs ---------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    from .sg_data import SynthConfig, synth_generate

    base = _read_json(args.config) if args.config else {}
    if args.objects is not None:
        base["n_objects"] = args.objects
    if args.include_below:
        base["include_below"] = True
    base["seed"] = args.seed
    cfg = SynthConfig.from_json(base)
    data = synth_generate(cfg, args.count)
    write_graphs(args.out, data)
    vocab_path = args.vocab_out or str(Path(args.out).with_suffix("")) + ".vocab.json"
    if data:
        save_vocab(data[0][0].vocab, vocab_path)
    else:
        from .sg_data import synth_vocab

        save_vocab(synth_vocab(cfg.include_below), vocab_path)
    log.info("wrote %d scenes to %s (vocabulary %s)", len(data), args.out, vocab_path)


def cmd_canonicalize(args) -> None:
    vocab = _vocab(args, args.input)
    records = read_graphs(args.input, vocab)
    rng = np.random.default_rng(args.seed)
    out = []
    if args.method == "sgc":
        if not args.formulas:
            raise ValidationError("--mode sgc needs --formulas")
        f = canon.load_formulas(args.formulas, vocab)
    else:
        params = canon.load_params(args.params) if args.params else canon.CanonParams.init(vocab.num_relations)
        if params.num_relations != vocab.num_relations:
            raise ValidationError(
                f"parameters cover {params.num_relations} relations, vocabulary has {vocab.num_relations}"
            )
    for g, layout in records:
        if not hasattr(g, "adjacency"):
            g = g.unweighted()
        if args.method == "sgc":
            h = canon.sgc(g, f)
        elif args.method == "wsgc-e":
            h = canon.wsgc_e(g, params, args.eps)
        else:
            h, _ = canon.wsgc_s(g, params, rng, args.eps)
        out.append((h, layout))
    write_graphs(args.out, out)


def cmd_transform(args) -> None:
    from .sg_data import noise_transform, semantic_equivalent_transform

    vocab = _vocab(args, args.input)
    records = read_graphs(args.input, vocab)
    rng = np.random.default_rng(args.seed)
    out = []
    if args.kind == "equivalent":
        if not args.formulas:
            raise ValidationError("--kind equivalent needs --formulas")
        f = canon.load_formulas(args.formulas, vocab)
    for g, layout in records:
        if not hasattr(g, "adjacency"):
            g = g.unweighted()
        if args.kind == "equivalent":
            h = semantic_equivalent_transform(g, layout, f, rng, args.xnear_threshold, args.p_drop)
        else:
            h = noise_transform(g, args.fraction, rng)
        out.append((h, layout))
    write_graphs(args.out, out)


def cmd_train(args) -> None:
    from .training import TrainConfig, TrainingAborted, load_train_data, save_run, train

    d = _read_json(args.config)
    d["seed"] = args.seed
    config = TrainConfig.from_json(d)
    vocab, train_data, val_data = load_train_data(config)
    try:
        model, params, report = train(config, train_data, val_data, vocab)
    except TrainingAborted as exc:
        log.error("training aborted: %s; saving the best checkpoint so far", exc)
        save_run(args.out_dir, exc.model, exc.params, _empty_report(), vocab, config)
        raise
    save_run(args.out_dir, model, params, report, vocab, config)
    summary = report.summary()
    print(json.dumps({"best_epoch": summary["best_epoch"], "best_val": summary["best_val"]}))


def _empty_report():
    from .training import TrainReport

    return TrainReport()


def cmd_predict(args) -> None:
    from .neural import load_model
    from .training import Pipeline, predict

    run = Path(args.model)
    model, doc = load_model(run / "model.json" if run.is_dir() else run)
    if "vocab" not in doc or "canon_params" not in doc:
        raise ValidationError("checkpoint lacks vocabulary or canonicalization parameters")
    vocab = RelationVocab.from_dict(doc["vocab"])
    params = canon.CanonParams.from_json(doc["canon_params"])
    cfg = {}
    summary = (run if run.is_dir() else run.parent) / "summary.json"
    if summary.exists():
        cfg = json.loads(summary.read_text()).get("config", {})
    mode = args.mode or cfg.get("mode", "wsgc-s")
    formulas = cfg.get("formulas")
    f = canon.FormulaSet.from_json(vocab, formulas) if formulas else None
    if mode == "sgc-known" and f is None:
        raise ValidationError("sgc-known checkpoint has no formula set")
    records = read_graphs(args.input, vocab)
    graphs = [g if hasattr(g, "adjacency") else g.unweighted() for g, _ in records]
    pipe = Pipeline(mode, vocab, f, cfg.get("prune_eps", canon.PRUNE_EPS))
    boxes = predict(model, params, graphs, pipe, args.seed)
    write_graphs(args.out, [(g, Layout(b)) for g, b in zip(graphs, boxes)])


def cmd_eval(args) -> None:
    pred, gt = _read_boxes(args.pred), _read_boxes(args.gt)
    res = evaluate(pred, gt)
    doc = res.as_dict()
    if args.per_scene:
        doc["per_scene"] = res.per_scene
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_experiment(args) -> None:
    from .experiment import load_spec, run_experiment

    spec = load_spec(args.spec)
    spec.seed = args.seed if args.seed is not None else spec.seed
    if args.workers:
        spec.workers = args.workers
    out = run_experiment(spec, args.out_dir)
    report = json.loads((out / "report.json").read_text())
    if report["failures"]:
        log.warning("%d failed cells or evaluations; see %s", len(report["failures"]), out / "report.json")
    print(str(out))


def cmd_render(args) -> None:
    from .render import rasterize, render_report

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.report:
        for p in render_report(args.report):
            print(p)
        return
    if not args.input:
        raise ValidationError("render needs --in or --report")
    vocab = _vocab(args, args.input)
    for k, (g, layout) in enumerate(read_graphs(args.input, vocab)):
        if layout is None:
            raise ValidationError(f"record {k + 1} has no boxes")
        (out / f"scene_{k:05d}.svg").write_text(rasterize(layout, g))


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgcanon", description="Scene-graph canonicalization and layout models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--seed", type=int, default=0)
        s.set_defaults(fn=fn)
        return s

    s = verb("gen-data", cmd_gen_data, "generate synthetic square scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--vocab-out")
    s.add_argument("--synth-config", "--config", dest="config", help="synthetic-dataset JSON")
    s.add_argument("--objects", type=int)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--include-below", action="store_true")

    s = verb("canonicalize", cmd_canonicalize, "complete scene graphs")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vocab")
    s.add_argument("--mode", "--method", dest="method", choices=("sgc", "wsgc-e", "wsgc-s"), default="sgc")
    s.add_argument("--formulas")
    s.add_argument("--params")
    s.add_argument("--eps", type=float, default=canon.PRUNE_EPS)

    s = verb("transform", cmd_transform, "equivalent or noisy scene-graph variants")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vocab")
    s.add_argument("--kind", choices=("equivalent", "noise", "noisy"), required=True)
    s.add_argument("--formulas")
    s.add_argument("--fraction", type=float, default=0.10)
    s.add_argument("--p-drop", type=float, default=0.5)
    s.add_argument("--xnear-threshold", type=float, default=0.10)

    s = verb("train", cmd_train, "train a layout model")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)

    s = verb("predict", cmd_predict, "predict layouts with a trained model")
    s.add_argument("--model", required=True, help="run directory or model.json")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("baseline", "sgc-known", "wsgc-s", "wsgc-e"))

    s = verb("eval", cmd_eval, "mIOU and recall of predicted layouts")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.add_argument("--per-scene", action="store_true")

    s = verb("experiment", cmd_experiment, "run an experiment grid")
    s.add_argument("--spec", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(seed=None)

    s = verb("render", cmd_render, "draw layouts or report charts as SVG")
    s.add_argument("--in", dest="input")
    s.add_argument("--report", help="experiment report directory")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--vocab")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SgCanonError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
