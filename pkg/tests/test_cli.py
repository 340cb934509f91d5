import json

import pytest

import sgcanon.cli as cli
from sgcanon.cli import main


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "scenes.jsonl"
    assert main(["gen-data", "--out", str(out), "--objects", "5", "--count", "12", "--seed", "1"]) == 0
    f = tmp_path / "formulas.json"
    f.write_text(json.dumps({"transitive": ["Above"], "converse": []}))
    return tmp_path, out, tmp_path / "scenes.vocab.json", f


def _lines(p):
    return [json.loads(x) for x in p.read_text().splitlines() if x.strip()]


def test_gen_canonicalize_transform(data):
    d, scenes, vocab, f = data
    assert len(_lines(scenes)) == 12 and vocab.exists()
    for mode in ("sgc", "wsgc-e", "wsgc-s"):
        out = d / f"c_{mode}.jsonl"
        args = ["canonicalize", "--in", str(scenes), "--out", str(out), "--vocab", str(vocab), "--mode", mode]
        if mode == "sgc":
            args += ["--formulas", str(f)]
        assert main(args) == 0
        assert len(_lines(out)) == 12
    closed = _lines(d / "c_sgc.jsonl")
    assert all(len(c["edges"]) >= len(s["edges"]) for c, s in zip(closed, _lines(scenes)))
    for kind in ("equivalent", "noise"):
        out = d / f"t_{kind}.jsonl"
        assert main(["transform", "--in", str(scenes), "--out", str(out), "--kind", kind,
                     "--formulas", str(f), "--vocab", str(vocab)]) == 0
    # without --vocab the vocabulary is read off the file
    assert main(["canonicalize", "--in", str(scenes), "--out", str(d / "x.jsonl"), "--formulas", str(f)]) == 0


def test_train_predict_eval_render(data, capsys):
    d, scenes, vocab, f = data
    cfg = d / "train.json"
    cfg.write_text(json.dumps({"mode": "wsgc-s", "layers": 1, "dim": 8, "hidden": 8, "epochs": 2,
                               "synth": {"n_objects": 4}, "train_count": 8, "val_count": 4}))
    run = d / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(run)]) == 0
    assert (run / "model.json").exists() and (run / "report.csv").exists()
    pred = d / "pred.jsonl"
    assert main(["predict", "--model", str(run), "--in", str(scenes), "--out", str(pred)]) == 0
    capsys.readouterr()
    assert main(["eval", "--pred", str(pred), "--gt", str(scenes), "--out", str(d / "ev.json")]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert 0.0 <= ev["miou"] <= 1.0 and ev["num_objects"] == 60
    assert main(["eval", "--pred", str(scenes), "--gt", str(scenes)]) == 0
    assert json.loads(capsys.readouterr().out)["miou"] == 1.0
    assert main(["render", "--in", str(scenes), "--out-dir", str(d / "svg")]) == 0
    assert len(list((d / "svg").glob("*.svg"))) == 12


def test_experiment_and_report_render(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"train": {"dim": 8, "hidden": 8, "epochs": 1}, "train_count": 4, "val_count": 2,
                                "grid": {"modes": ["baseline"], "layers": [1], "objects": [3]}}))
    out = tmp_path / "exp"
    assert main(["experiment", "--spec", str(spec), "--out-dir", str(out)]) == 0
    assert (out / "grid.csv").exists()
    assert main(["render", "--report", str(out), "--out-dir", str(tmp_path / "figs")]) == 0
    assert (out / "grid.svg").exists()


def test_exit_codes(data, tmp_path, monkeypatch):
    d, scenes, vocab, f = data
    assert main(["no-such-verb"]) == 1
    assert main(["eval", "--pred", str(tmp_path / "missing.jsonl"), "--gt", str(scenes)]) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["eval", "--pred", str(bad), "--gt", str(scenes)]) == 1
    assert main(["canonicalize", "--in", str(scenes), "--out", str(tmp_path / "o.jsonl"), "--mode", "sgc"]) == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "baseline", "typo": 1}))
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 1

    def explode(args):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "cmd_eval", explode)
    assert main(["eval", "--pred", str(scenes), "--gt", str(scenes)]) == 2
