import json

import numpy as np
import pytest

import sgcanon.experiment as E
from sgcanon.errors import ValidationError
from sgcanon.experiment import Cell, ExperimentSpec, derive_seed, read_csv, run_experiment

TINY = {
    "seed": 3,
    "train": {"dim": 8, "hidden": 16, "epochs": 2, "batch_size": 8, "lr_gcn": 1e-3},
    "train_count": 12,
    "val_count": 6,
    "grid": {"modes": ["baseline", "sgc-known"], "layers": [1, 2], "objects": [4]},
}


def test_tiny_grid(tmp_path):
    out = run_experiment(TINY, tmp_path / "run")
    rows = read_csv(out / "grid.csv")
    assert [(r["mode"], r["layers"], r["objects"]) for r in rows] == [
        ("baseline", 1, 4), ("baseline", 2, 4), ("sgc-known", 1, 4), ("sgc-known", 2, 4)
    ]
    assert all(r["status"] == "ok" and r["epochs"] == 2 for r in rows)
    assert all(0.0 <= r["miou"] <= 1.0 for r in rows)
    for c in ("baseline_L1_n4", "sgc-known_L2_n4"):
        d = out / "cells" / c
        assert (d / "model.json").exists() and (d / "report.csv").exists()
    report = json.loads((out / "report.json").read_text())
    assert report["failures"] == [] and len(report["cells"]) == 4


def test_grid_is_deterministic(tmp_path):
    a = run_experiment(TINY, tmp_path / "a")
    b = run_experiment(TINY, tmp_path / "b")
    assert (a / "grid.csv").read_text() == (b / "grid.csv").read_text()


def test_empty_grid(tmp_path):
    out = run_experiment({}, tmp_path / "empty")
    assert read_csv(out / "grid.csv") == []
    assert json.loads((out / "report.json").read_text())["cells"] == []


def test_failed_cell_is_recorded(tmp_path, monkeypatch):
    real = E.train

    def flaky(cfg, *a, **k):
        if cfg.mode == "sgc-known":
            raise RuntimeError("boom")
        return real(cfg, *a, **k)

    monkeypatch.setattr(E, "train", flaky)
    spec = {**TINY, "grid": {"modes": ["baseline", "sgc-known"], "layers": [1], "objects": [4]},
            "robustness": {"modes": ["baseline", "sgc-known"], "layers": 1, "objects": 4}}
    out = run_experiment(spec, tmp_path / "f")
    rows = {r["mode"]: r for r in read_csv(out / "grid.csv")}
    assert rows["baseline"]["status"] == "ok"
    assert rows["sgc-known"]["status"] == "failed" and "boom" in rows["sgc-known"]["error"]
    assert (out / "cells" / "sgc-known_L1_n4" / "error.txt").exists()
    rob = {r["mode"]: r for r in read_csv(out / "robustness.csv")}
    assert rob["sgc-known"]["status"] == "skipped" and rob["baseline"]["status"] == "ok"


def test_generalization_and_robustness_sections(tmp_path):
    spec = {**TINY, "grid": None,
            "generalization": {"modes": ["baseline"], "layers": 1, "train_objects": 4,
                               "eval_objects": [4, 8], "eval_count": 5},
            "robustness": {"modes": ["baseline"], "layers": 1, "objects": 4, "noise_fraction": 0.5}}
    out = run_experiment(spec, tmp_path / "g")
    gen = read_csv(out / "generalization.csv")
    assert [r["eval_objects"] for r in gen] == [4, 8]
    assert all(r["status"] == "ok" and r["num_objects"] == 5 * r["eval_objects"] for r in gen)
    rob = read_csv(out / "robustness.csv")
    assert len(rob) == 1 and {"clean", "equivalent", "noisy"} <= set(rob[0])
    # both sections share one trained cell
    assert [p.name for p in (out / "cells").iterdir()] == ["baseline_L1_n4"]


def test_spec_validation(tmp_path):
    with pytest.raises(ValidationError):
        ExperimentSpec.from_json({"grd": {}})
    with pytest.raises(ValidationError):
        ExperimentSpec.from_json({"grid": {"modes": ["magic"]}})
    with pytest.raises(ValidationError):
        ExperimentSpec.from_json({"train": {"mode": "baseline"}})
    with pytest.raises(ValidationError):
        ExperimentSpec.from_json({"train": {"epoch": 3}})
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ValidationError):
        E.load_spec(p)


def test_derive_seed_and_cells():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1) != derive_seed(0, "a", 2)
    spec = ExperimentSpec.from_json({
        "grid": {"modes": ["baseline"], "layers": [2], "objects": [16]},
        "generalization": {"modes": ["baseline", "wsgc-s"], "layers": 2, "train_objects": 16},
    })
    assert spec.cells() == [Cell("baseline", 2, 16), Cell("wsgc-s", 2, 16)]
    assert spec.train_config(Cell("wsgc-s", 2, 16)).formulas["transitive"] == ["Above"]
