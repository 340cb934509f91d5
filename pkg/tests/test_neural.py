import numpy as np
import pytest

from conftest import make_vocab
from gradcheck import gcn_gradient_errors, gcn_instance, random_weighted_graph
from sgcanon.errors import ConsistencyError, ParseError, ShapeError, TrainingError
from sgcanon.neural import (
    AdamState,
    GcnModel,
    adam_step,
    forward_packed,
    gcn_backward,
    gcn_forward,
    load_model,
    pack,
    save_model,
)
from sgcanon.sg_core import SceneGraph, SceneObject, WeightedSceneGraph


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    errs = gcn_gradient_errors(seed)
    bad = {k: e for k, e in errs.items() if e >= 1e-4}
    assert not bad, bad


def test_no_edges_depends_on_category_only():
    vocab = make_vocab(2, 3)
    model = GcnModel.init(3, 2, 4, 6, 2, seed=1)
    g = SceneGraph(vocab, (SceneObject(0), SceneObject(2), SceneObject(0)))
    lay, _ = gcn_forward(g, model)
    b = lay.boxes
    assert np.array_equal(b[0], b[2])
    assert not np.array_equal(b[0], b[1])


def test_zero_weights_give_sigmoid_bias():
    vocab = make_vocab(2)
    model = GcnModel.init(2, 2, 4, 6, 2, seed=1)
    for k, v in model.params.items():
        v[...] = 0.0
    model.params["box.b2"][...] = [0.1, -0.2, 0.3, 0.0]
    g = WeightedSceneGraph(vocab, (SceneObject(0), SceneObject(1)), ((0, 1, 1),), (0.3,))
    lay, _ = gcn_forward(g, model)
    assert np.allclose(lay.boxes, 1 / (1 + np.exp(-np.array([0.1, -0.2, 0.3, 0.0]))))


def test_output_continuous_in_weight():
    vocab = make_vocab(2)
    model = GcnModel.init(2, 2, 4, 6, 2, seed=2)
    objs = (SceneObject(0), SceneObject(1), SceneObject(1))
    out = []
    for w in (0.5, 0.5 + 1e-7):
        g = WeightedSceneGraph(vocab, objs, ((0, 1, 1), (1, 0, 2)), (w, 1.0))
        out.append(gcn_forward(g, model)[0].boxes)
    assert np.abs(out[0] - out[1]).max() < 1e-5


def test_single_edge_constant_message_weight_gradient_zero():
    vocab = make_vocab(1)
    model = GcnModel.init(1, 1, 3, 4, 1, seed=0)
    for t in range(1):
        model.params[f"g{t}.W3"][...] = 0.0  # F output = constant bias
    model.params["g0.b3"][...] = np.random.default_rng(0).normal(size=9)
    g = WeightedSceneGraph(vocab, (SceneObject(0), SceneObject(0)), ((0, 0, 1),), (0.4,))
    _, tape = gcn_forward(g, model)
    _, dw = gcn_backward(tape, np.ones((2, 4)))
    assert np.allclose(dw, 0.0, atol=1e-15)


def test_zero_upstream_gives_zero_gradients():
    g, model, _ = gcn_instance(0)
    _, tape = gcn_forward(g, model)
    grads, dw = gcn_backward(tape, np.zeros((g.num_nodes, 4)))
    assert all(not v.any() for v in grads.values()) and not dw.any()


def test_stale_tape_and_bad_shapes():
    g, model, _ = gcn_instance(1)
    _, tape = gcn_forward(g, model)
    with pytest.raises(ConsistencyError):
        gcn_backward(tape, np.zeros((g.num_nodes + 1, 4)))
    model.touch()
    with pytest.raises(ConsistencyError):
        gcn_backward(tape, np.zeros((g.num_nodes, 4)))
    small = GcnModel.init(1, 3, 3, 5, 2)
    with pytest.raises(ShapeError):
        gcn_forward(g, small)


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    vocab = make_vocab(3)
    model = GcnModel.init(2, 3, 4, 6, 3, seed=4)
    for _ in range(5):
        g = random_weighted_graph(rng, vocab, 7)
        perm = rng.permutation(7)  # new index of old node k is perm[k]
        inv = np.argsort(perm)
        objs = tuple(g.objects[k] for k in inv)
        table = {(int(perm[i]), r, int(perm[j])): w for (i, r, j), w in g.as_dict().items()}
        h = WeightedSceneGraph.from_mapping(vocab, objs, table)
        a = gcn_forward(g, model)[0].boxes
        b = gcn_forward(h, model)[0].boxes
        assert np.allclose(b[perm], a, atol=1e-12)


def test_determinism_and_box_range():
    g, model, _ = gcn_instance(5, n=8)
    a = gcn_forward(g, model)[0].boxes
    b = gcn_forward(g, model)[0].boxes
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_packing_matches_single_graphs():
    rng = np.random.default_rng(6)
    vocab = make_vocab(3)
    model = GcnModel.init(2, 3, 4, 6, 2, seed=6)
    gs = [random_weighted_graph(rng, vocab, int(k)) for k in (3, 0, 5, 1)]
    boxes, _ = forward_packed(pack(gs), model)
    off = np.cumsum([0] + [g.num_nodes for g in gs])
    for k, g in enumerate(gs):
        assert np.allclose(boxes[off[k]:off[k + 1]], gcn_forward(g, model)[0].boxes, atol=1e-13)


def test_checkpoint_round_trip(tmp_path):
    _, model, _ = gcn_instance(7)
    save_model(model, tmp_path / "m.json", {"note": "x"})
    m2, doc = load_model(tmp_path / "m.json")
    assert doc["note"] == "x"
    assert all(np.array_equal(model.params[k], m2.params[k]) for k in model.params)
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ParseError):
        load_model(tmp_path / "bad.json")


# --- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = {"x": np.array([1.0, -2.0])}
    adam_step(p, {"x": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(p["x"], [1.0, -2.0])


def test_adam_constant_gradient_step_is_lr():
    p = {"x": np.array([0.0])}
    st = AdamState()
    prev = 0.0
    for _ in range(200):
        adam_step(p, {"x": np.array([3.7])}, st, 1e-3)
        step = prev - p["x"][0]
        prev = p["x"][0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_quadratic_bowl():
    p = {"x": np.array([1.0])}
    st = AdamState()
    for _ in range(2000):
        adam_step(p, {"x": 2 * p["x"]}, st, 1e-2)
    assert abs(p["x"][0]) < 1e-3


def test_adam_rejects_nan():
    with pytest.raises(TrainingError):
        adam_step({"x": np.zeros(1)}, {"x": np.array([np.nan])}, AdamState(), 0.1)
