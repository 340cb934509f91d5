import json

import numpy as np
import pytest

from conftest import make_vocab
from gradcheck import exact_reinforce_gradient, monte_carlo_reinforce, reinforce_toy
from sgcanon.canon import CanonParams, SampleRecord, sample_converses
from sgcanon.errors import ShapeError, ValidationError
from sgcanon.sg_core import Layout, SceneGraph, SceneObject
from sgcanon.sg_data import SynthConfig, synth_formulas, synth_generate, synth_vocab
from sgcanon.training import TrainConfig, l1_loss, load_train_data, reinforce_grad, save_run, train

FORMULAS = {"transitive": ["Above"], "converse": []}


def tiny(mode, **kw):
    base = dict(mode=mode, layers=2, dim=8, hidden=16, epochs=3, batch_size=8, lr_gcn=1e-3,
                lr_canon=0.03, seed=4, patience=100, formulas=FORMULAS)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def synth_small():
    data = synth_generate(SynthConfig(n_objects=6, seed=2), 24)
    return data[:16], data[16:]


def test_l1_examples():
    rng = np.random.default_rng(0)
    a = rng.random((5, 4))
    assert l1_loss(a, a) == 0.0
    assert l1_loss(a + 0.1, a) == pytest.approx(0.1, abs=1e-12)
    b = rng.random((5, 4))
    direct = sum(abs(a[i, k] - b[i, k]) for i in range(5) for k in range(4)) / 20
    assert l1_loss(Layout(a.clip(0, 1)), b) == pytest.approx(direct, abs=1e-12)
    with pytest.raises(ShapeError):
        l1_loss(a, b[:3])


def test_reinforce_zero_reward_and_saturated_score():
    vocab = make_vocab(2)
    g = SceneGraph(vocab, (SceneObject(0), SceneObject(0)), ((0, 0, 1),))
    p = CanonParams.init(2)
    s = sample_converses(g, p, np.random.default_rng(0))
    assert not reinforce_grad(s, 0.0).any()
    sat = CanonParams([0.0, 0.0], [[-40.0, -40.0, 40.0], [-40.0, -40.0, 40.0]])
    s = sample_converses(g, sat, np.random.default_rng(0))
    assert np.abs(reinforce_grad(s, 3.0)).max() < 1e-30


def test_reinforce_matches_enumeration():
    g, params, reward = reinforce_toy()
    exact = exact_reinforce_gradient(g, params, reward)
    mean, se = monte_carlo_reinforce(g, params, reward, 20000, seed=1)
    assert np.all(np.abs(mean - exact) <= 3 * se + 1e-12)


def test_reinforce_gradient_tied():
    g, params, reward = reinforce_toy()
    s = sample_converses(g, params, np.random.default_rng(2))
    out = reinforce_grad(s, 1.3)
    assert out[0, 1] == out[1, 0]


def test_baseline_loss_decreases_on_two_object_scenes():
    data = synth_generate(SynthConfig(n_objects=2, seed=0), 64)
    cfg = tiny("baseline", epochs=10, lr_gcn=3e-3)
    _, _, rep = train(cfg, data[:48], data[48:])
    assert np.mean(rep.loss[5:]) < np.mean(rep.loss[:5])
    assert rep.loss[-1] < rep.loss[0]


@pytest.mark.parametrize("mode", ["wsgc-s", "wsgc-e"])
def test_seed_determinism_and_symmetry(mode, synth_small):
    tr, va = synth_small
    seen = []

    def hook(epoch, report):
        seen.append(epoch)

    m1, p1, r1 = train(tiny(mode), tr, va, on_epoch=hook)
    m2, p2, r2 = train(tiny(mode), tr, va)
    assert seen == [0, 1, 2]
    assert r1.loss == r2.loss and r1.miou == r2.miou
    assert np.array_equal(p1.theta_conv, p2.theta_conv)
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
    sq = p1.theta_conv[:, :3]
    assert np.array_equal(sq, sq.T)
    assert not np.array_equal(p1.theta_trans, CanonParams.init(3).theta_trans)


def test_symmetry_after_every_step(synth_small, monkeypatch):
    import sgcanon.training as T

    checks = []
    real = T.adam_step

    def spy(params, grads, state, lr, *a, **k):
        out = real(params, grads, state, lr, *a, **k)
        if "theta_conv" in params:
            checks.append(params["theta_conv"].copy())
        return out

    monkeypatch.setattr(T, "adam_step", spy)
    tr, va = synth_small
    # symmetrize runs right after the canonical step; check the final state of each step
    seen = []
    real_sym = CanonParams.symmetrize

    def sym(self):
        real_sym(self)
        sq = self.theta_conv[:, :self.num_relations]
        seen.append(np.array_equal(sq, sq.T))

    monkeypatch.setattr(CanonParams, "symmetrize", sym)
    train(tiny("wsgc-s", epochs=2), tr, va)
    assert len(seen) == len(checks) > 0 and all(seen)


def test_known_vs_saturated_losses_identical(synth_small):
    tr, va = synth_small
    vocab = tr[0][0].vocab
    sat = CanonParams.saturated(synth_formulas(vocab), vocab.num_relations)
    _, _, known = train(tiny("sgc-known"), tr, va)
    _, _, learned = train(tiny("wsgc-s"), tr, va, params=sat)
    assert known.loss == learned.loss
    assert known.miou == learned.miou


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(mode="nope")
    with pytest.raises(ValidationError):
        TrainConfig(mode="sgc-known")
    with pytest.raises(ValidationError):
        TrainConfig.from_json({"mode": "baseline", "bogus": 1})
    with pytest.raises(ValidationError):
        train(tiny("baseline"), [], [])


def test_early_stopping_restores_best(synth_small):
    tr, va = synth_small
    _, _, rep = train(tiny("baseline", epochs=30, patience=1, lr_gcn=0.3), tr, va)
    assert rep.stopped_early or rep.epochs == 30
    assert rep.miou[rep.best_epoch] == max(rep.miou)


def test_load_and_save_run(tmp_path):
    cfg = tiny("baseline", epochs=1, synth={"n_objects": 4, "seed": 1}, train_count=8, val_count=4)
    vocab, tr, va = load_train_data(cfg)
    assert vocab == synth_vocab() and len(tr) == 8 and len(va) == 4
    model, params, rep = train(cfg, tr, va)
    save_run(tmp_path, model, params, rep, vocab, cfg)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["epochs"] == 1 and summary["config"]["mode"] == "baseline"
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,loss,miou,r03,r05,p_trans[Above]")
    with pytest.raises(ValidationError):
        load_train_data(tiny("baseline"))


@pytest.mark.parametrize("kind", [True, "scene"])
def test_reinforce_baselines_run(kind, synth_small):
    tr, va = synth_small
    _, p1, r1 = train(tiny("wsgc-s", reinforce_baseline=kind, baseline_decay=0.5), tr, va)
    _, p2, r2 = train(tiny("wsgc-s", reinforce_baseline=kind, baseline_decay=0.5), tr, va)
    assert r1.loss == r2.loss and np.array_equal(p1.theta_conv, p2.theta_conv)
    with pytest.raises(ValidationError):
        tiny("wsgc-s", reinforce_baseline="sometimes")
    with pytest.raises(ValidationError):
        tiny("wsgc-s", baseline_decay=1.0)
