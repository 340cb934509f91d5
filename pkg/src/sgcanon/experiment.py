"""Synthetic-scene experiment grids.

An experiment file is one JSON object::

    {
      "seed": 0,
      "synth": {"small_size": 0.25, "large_size": 0.5},
      "train": {"dim": 32, "hidden": 64, "epochs": 30, "lr_gcn": 1e-3},
      "train_count": 512, "val_count": 128,
      "grid": {"modes": ["baseline", "sgc-known", "wsgc-s"], "layers": [2], "objects": [16]},
      "generalization": {"modes": [...], "layers": 2, "train_objects": 16,
                         "eval_objects": [16, 32, 64, 128], "eval_count": 64},
      "robustness": {"modes": [...], "layers": 2, "objects": 16, "noise_fraction": 0.1},
      "workers": 1
    }

Every section is optional.  Cells are keyed by (mode, layers, objects); the
generalization and robustness sections reuse a grid cell's checkpoint when
one matches and train the missing cells otherwise.
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .canon import CanonParams, FormulaSet
from .errors import ValidationError
from .metrics import evaluate
from .neural import GcnModel, load_model
from .sg_data import (
    SynthConfig,
    noise_transform,
    semantic_equivalent_transform,
    synth_formulas,
    synth_generate,
    synth_vocab,
)
from .training import MODES, Pipeline, TrainConfig, predict, save_run, train

log = logging.getLogger(__name__)

_SECTIONS = {"seed", "synth", "train", "train_count", "val_count", "grid", "generalization",
             "robustness", "workers", "formulas"}


def derive_seed(base: int, *parts) -> int:
    """Order-independent seed for a named piece of an experiment."""
    key = "/".join(str(p) for p in (base,) + parts)
    return zlib.crc32(key.encode()) & 0x7FFFFFFF


@dataclass(frozen=True)
class Cell:
    mode: str
    layers: int
    objects: int

    @property
    def name(self) -> str:
        return f"{self.mode}_L{self.layers}_n{self.objects}"


@dataclass
class ExperimentSpec:
    seed: int = 0
    synth: dict | None = None
    train: dict | None = None
    train_count: int = 512
    val_count: int = 128
    grid: dict | None = None
    generalization: dict | None = None
    robustness: dict | None = None
    workers: int = 1
    formulas: dict | None = None

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentSpec":
        if not isinstance(d, dict):
            raise ValidationError("experiment spec must be a JSON object")
        unknown = set(d) - _SECTIONS
        if unknown:
            raise ValidationError(f"unknown experiment keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.check()
        return spec

    def check(self) -> None:
        modes = []
        for sec in (self.grid, self.generalization, self.robustness):
            if sec is not None:
                modes += list(sec.get("modes", []))
        bad = [m for m in modes if m not in MODES]
        if bad:
            raise ValidationError(f"unknown modes {bad}; expected {MODES}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.train:
            for k in ("mode", "layers", "seed", "formulas", "synth"):
                if k in self.train:
                    raise ValidationError(f"train section may not set {k!r}; the grid controls it")
            TrainConfig.from_json({**self.train, "mode": "baseline"})
        self.synth_config(16)

    def synth_config(self, n: int, seed: int = 0) -> SynthConfig:
        base = dict(self.synth or {})
        base.pop("n_objects", None)
        base.pop("seed", None)
        return SynthConfig.from_json({**base, "n_objects": n, "seed": seed})

    def train_config(self, cell: Cell) -> TrainConfig:
        v = synth_vocab(self.synth_config(cell.objects).include_below)
        formulas = self.formulas or synth_formulas(v).to_json(v)
        return TrainConfig.from_json({
            **(self.train or {}),
            "mode": cell.mode,
            "layers": cell.layers,
            "seed": derive_seed(self.seed, "cell", cell.name),
            "formulas": formulas,
        })

    def cells(self) -> list[Cell]:
        """Every cell any section needs, grid cells first, no duplicates."""
        out: list[Cell] = []
        g = self.grid or {}
        for m in g.get("modes", []):
            for L in g.get("layers", []):
                for n in g.get("objects", []):
                    out.append(Cell(m, int(L), int(n)))
        for sec, key in ((self.generalization, "train_objects"), (self.robustness, "objects")):
            if sec:
                for m in sec.get("modes", []):
                    out.append(Cell(m, int(sec.get("layers", 2)), int(sec.get(key, 16))))
        return list(dict.fromkeys(out))


def load_spec(path) -> ExperimentSpec:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentSpec.from_json(d)


def _dataset(spec: ExperimentSpec, split: str, n: int, count: int):
    return synth_generate(spec.synth_config(n, derive_seed(spec.seed, split, n)), count)


def _run_cell(spec_dict: dict, cell: Cell, out_dir: str) -> dict:
    """Train one cell into ``out_dir``; returns a result row (never raises)."""
    spec = ExperimentSpec.from_json(spec_dict)
    row = {"mode": cell.mode, "layers": cell.layers, "objects": cell.objects}
    try:
        cfg = spec.train_config(cell)
        train_data = _dataset(spec, "train", cell.objects, spec.train_count)
        val_data = _dataset(spec, "val", cell.objects, spec.val_count)
        model, params, report = train(cfg, train_data, val_data)
        save_run(out_dir, model, params, report, train_data[0][0].vocab, cfg)
        best = report.summary()["best_val"] or {"miou": float("nan"), "r03": float("nan"), "r05": float("nan")}
        row.update(status="ok", epochs=report.epochs, best_epoch=report.best_epoch, **best, error="")
    except Exception as exc:  # a failed cell must not stop the grid
        log.error("cell %s failed: %s", cell.name, exc)
        (Path(out_dir) / "error.txt").parent.mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "error.txt").write_text(traceback.format_exc())
        row.update(status="failed", epochs=0, best_epoch=-1, miou=float("nan"), r03=float("nan"),
                   r05=float("nan"), error=f"{type(exc).__name__}: {exc}")
    return row


def _load_cell(cell_dir: Path) -> tuple[GcnModel, CanonParams]:
    model, extra = load_model(cell_dir / "model.json")
    return model, CanonParams.from_json(extra["canon_params"])


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def _eval_cell(spec: ExperimentSpec, cell: Cell, cell_dir: Path, data, seed: int):
    model, params = _load_cell(cell_dir)
    cfg = spec.train_config(cell)
    vocab = data[0][0].vocab
    pipe = Pipeline(cell.mode, vocab, FormulaSet.from_json(vocab, cfg.formulas), cfg.prune_eps)
    preds = predict(model, params, [g for g, _ in data], pipe, seed)
    return evaluate(preds, [l.boxes for _, l in data])


def run_experiment(spec: ExperimentSpec | dict | str | Path, out_dir) -> Path:
    """Run every section of ``spec``; results land in ``out_dir``.

    Writes ``grid.csv``, ``generalization.csv``, ``robustness.csv``,
    ``report.json`` and one subdirectory per trained cell (checkpoint,
    per-epoch trajectory CSV, summary).
    """
    if isinstance(spec, (str, Path)):
        spec = load_spec(spec)
    elif isinstance(spec, dict):
        spec = ExperimentSpec.from_json(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec_dict = asdict(spec)
    (out / "spec.json").write_text(json.dumps(spec_dict, indent=1, sort_keys=True))

    cells = spec.cells()
    cell_dirs = {c: out / "cells" / c.name for c in cells}
    if spec.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futs = [pool.submit(_run_cell, spec_dict, c, str(cell_dirs[c])) for c in cells]
            rows = [f.result() for f in futs]
    else:
        rows = [_run_cell(spec_dict, c, str(cell_dirs[c])) for c in cells]
    status = {c: r for c, r in zip(cells, rows)}

    grid_header = ["mode", "layers", "objects", "status", "epochs", "best_epoch", "miou", "r03", "r05", "error"]
    g = spec.grid or {}
    grid_cells = [Cell(m, int(L), int(n)) for m in g.get("modes", []) for L in g.get("layers", [])
                  for n in g.get("objects", [])]
    _write_csv(out / "grid.csv", grid_header, [status[c] for c in grid_cells])

    failures = [r for r in rows if r["status"] != "ok"]
    gen_rows, rob_rows = [], []
    if spec.generalization:
        sec = spec.generalization
        L, n0 = int(sec.get("layers", 2)), int(sec.get("train_objects", 16))
        count = int(sec.get("eval_count", spec.val_count))
        for n in sec.get("eval_objects", [n0]):
            data = _dataset(spec, "general", int(n), count)
            for m in sec.get("modes", []):
                c = Cell(m, L, n0)
                row = {"mode": m, "layers": L, "train_objects": n0, "eval_objects": int(n)}
                if status[c]["status"] != "ok":
                    gen_rows.append({**row, "status": "skipped"})
                    continue
                try:
                    ev = _eval_cell(spec, c, cell_dirs[c], data, derive_seed(spec.seed, "eval", n))
                    gen_rows.append({**row, "status": "ok", **ev.as_dict()})
                except Exception as exc:
                    failures.append({**row, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
                    gen_rows.append({**row, "status": "failed"})
    _write_csv(out / "generalization.csv",
               ["mode", "layers", "train_objects", "eval_objects", "status", "miou", "r03", "r05", "num_objects"],
               gen_rows)

    if spec.robustness:
        sec = spec.robustness
        L, n = int(sec.get("layers", 2)), int(sec.get("objects", 16))
        frac = float(sec.get("noise_fraction", 0.1))
        clean = _dataset(spec, "val", n, spec.val_count)
        vocab = clean[0][0].vocab
        f = synth_formulas(vocab)
        xthr = spec.synth_config(n).xnear_threshold
        rng_eq = np.random.default_rng(derive_seed(spec.seed, "equivalent", n))
        rng_no = np.random.default_rng(derive_seed(spec.seed, "noisy", n))
        variants = {
            "clean": clean,
            "equivalent": [(semantic_equivalent_transform(g, l, f, rng_eq, xthr), l) for g, l in clean],
            "noisy": [(noise_transform(g, frac, rng_no), l) for g, l in clean],
        }
        for m in sec.get("modes", []):
            c = Cell(m, L, n)
            row = {"mode": m, "layers": L, "objects": n}
            if status[c]["status"] != "ok":
                rob_rows.append({**row, "status": "skipped"})
                continue
            try:
                for cond, data in variants.items():
                    ev = _eval_cell(spec, c, cell_dirs[c], data, derive_seed(spec.seed, "eval", n))
                    row[cond] = ev.miou
                    row[f"{cond}_r03"] = ev.r03
                    row[f"{cond}_r05"] = ev.r05
                rob_rows.append({**row, "status": "ok"})
            except Exception as exc:
                failures.append({**row, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
                rob_rows.append({**row, "status": "failed"})
    conds = ["clean", "equivalent", "noisy"]
    _write_csv(out / "robustness.csv",
               ["mode", "layers", "objects", "status"] + conds + [f"{c}_{k}" for c in conds for k in ("r03", "r05")],
               rob_rows)

    report = {
        "cells": rows,
        "generalization": gen_rows,
        "robustness": rob_rows,
        "failures": failures,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, default=float))
    return out


def read_csv(path) -> list[dict]:
    """Rows of a report CSV with numeric fields converted."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            for k, v in r.items():
                try:
                    r[k] = int(v)
                except (TypeError, ValueError):
                    try:
                        r[k] = float(v)
                    except (TypeError, ValueError):
                        pass
            rows.append(r)
    return rows
