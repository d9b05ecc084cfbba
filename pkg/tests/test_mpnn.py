import numpy as np
import pytest

from helpers import random_stroke_points
from strokegraph.errors import ConfigError
from strokegraph.graphenc import encode_from_points
from strokegraph.mpnn import (
    GgnnModel,
    ModelConfig,
    batch_graphs,
    param_breakdown,
    param_count,
    param_report,
    preset,
)
from strokegraph.ndgrad import ParameterStore, Tape, Tensor, add_mlp, ops
from strokegraph.ndgrad.gradcheck import numeric_grad, rel_error

SMALL = ModelConfig(n=10, hidden_dim=100, phi1_dims=(16,), phi2_dims=(16,), phi3_dims=(16,),
                    message_steps=2, feature_dim=8, class_count=4)


def graph(seed, k=3, label=0):
    rng = np.random.default_rng(seed)
    pts = random_stroke_points(rng, k, 10, 40, 260)
    return encode_from_points(pts, [(i, 1, i + 1, 0) for i in range(k - 1)], label=label)


def test_init_state_pads_scaled_distances():
    m = GgnnModel(SMALL)
    x = np.arange(200, dtype=float).reshape(2, 100)
    h = m.init_state(x).data
    assert h.shape == (2, 100)
    assert np.allclose(h, x / 224.0)
    wide = GgnnModel(ModelConfig(n=3, hidden_dim=12, phi1_dims=(4,), phi2_dims=(4,), phi3_dims=(4,)))
    h = wide.init_state(np.ones((1, 9))).data
    assert np.allclose(h[0, :9], 1 / 224.0) and np.all(h[0, 9:] == 0)
    with pytest.raises(ConfigError):
        m.init_state(np.ones((1, 16)))


def test_hidden_dim_must_hold_matrix():
    with pytest.raises(ConfigError):
        ModelConfig(n=10, hidden_dim=64)


def test_batch_graphs_is_symmetric():
    g = graph(0, k=3)
    b = batch_graphs([g])
    assert sorted(zip(b.receivers, b.senders)) == [(0, 1), (1, 0), (1, 2), (2, 1)]
    for r, s, e in zip(b.receivers, b.senders, b.message_inputs):
        lo, hi = min(r, s), max(r, s)
        expect = g.edge_matrix(lo, hi) if r == lo else g.edge_matrix(lo, hi).T
        assert np.array_equal(e.reshape(10, 10), expect)


def test_union_batch_matches_individual_forwards():
    m = GgnnModel(SMALL, seed=3)
    gs = [graph(s, k=1 + s % 3) for s in range(5)]
    together = m.logits(gs)
    alone = np.concatenate([m.logits([g]) for g in gs])
    assert np.allclose(together, alone, atol=1e-12)


def test_stroke_permutation_invariance():
    rng = np.random.default_rng(5)
    pts = random_stroke_points(rng, 4, 10, 40, 260)
    pairs = [(0, 1), (1, 2), (2, 3), (0, 3)]
    m = GgnnModel(SMALL, seed=1)
    base, _ = m.forward_points(np.stack(pts), pairs)
    perm = [2, 0, 3, 1]
    inv = {old: new for new, old in enumerate(perm)}
    moved, _ = m.forward_points(np.stack([pts[p] for p in perm]), [(inv[a], inv[b]) for a, b in pairs])
    assert np.allclose(base.data, moved.data, atol=1e-12)


def test_forward_points_matches_encoded_graph():
    rng = np.random.default_rng(6)
    pts = random_stroke_points(rng, 3, 10, 40, 260)
    g = encode_from_points(pts, [(0, 1, 1, 0), (1, 0, 2, 1)])
    m = GgnnModel(SMALL, seed=2)
    a, _ = m.forward_points(np.stack(pts), [(0, 1), (1, 2)])
    assert np.allclose(a.data, m.logits([g]), atol=1e-12)


def test_gradient_wrt_points():
    rng = np.random.default_rng(7)
    x = np.stack(random_stroke_points(rng, 2, 10, 40, 260))
    m = GgnnModel(SMALL, seed=4)
    t = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        logits, _ = m.forward_points(t, [(0, 1)])
        loss = ops.softmax_cross_entropy(logits, [2])
    tape.backward(loss)

    def f():
        lg, _ = m.forward_points(x, [(0, 1)])
        return ops.softmax_cross_entropy(lg, [2]).item()

    assert rel_error(t.grad, numeric_grad(f, x)) < 1e-5


def test_every_parameter_receives_gradient():
    m = GgnnModel(SMALL, seed=0)
    for _, p in m.store.items():
        p.requires_grad = True
    b = batch_graphs([graph(s, k=3, label=s % 4) for s in range(4)])
    with Tape() as tape:
        logits, _ = m.forward_batch(b)
        loss = ops.softmax_cross_entropy(logits, b.labels)
    tape.backward(loss)
    dead = [k for k, p in m.store.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_zero_weights_give_uniform_probabilities():
    m = GgnnModel(SMALL)
    m.store.load_state({k: np.zeros_like(v) for k, v in m.store.state().items()})
    p = m.predict_proba([graph(1), graph(2)])
    assert np.allclose(p, 1 / 4)
    assert m.predict([graph(1)]).tolist() == [0]


def test_softmax_shift_invariance():
    z = np.random.default_rng(0).standard_normal((3, 5))
    assert np.allclose(ops.softmax(z), ops.softmax(z + 123.0))
    assert np.allclose(ops.softmax(np.array([[1000.0, 0.0]])), [[1.0, 0.0]])


@pytest.mark.parametrize("a,b", [(1, 1), (3, 7), (100, 128)])
def test_single_affine_layer_count(a, b):
    s = ParameterStore()
    add_mlp(s, "x", (a, b), np.random.default_rng(0))
    assert s.count() == a * b + b


def test_preset_counts_and_report():
    m = GgnnModel(preset("mnist"))
    assert param_count(m) == 325_234
    parts = param_breakdown(m)
    assert sum(parts.values()) == param_count(m)
    assert parts["cls"] == 10 * 10 + 10
    assert parts["gru"] == 3 * (100 * 100 + 100 * 100 + 100)
    text = param_report(m)
    assert "546,634" in text and "elementwise" in text
    assert GgnnModel(preset("mnist", message_mode="matrix")).param_count() == 1_602_334


def test_quickdraw_preset_shape():
    c = preset("quickdraw")
    assert c.message_steps == 3 and c.class_count == 7 and 521 in c.phi1_dims
    assert 521 not in preset("quickdraw", fix_521=True).phi1_dims
    with pytest.raises(ConfigError):
        preset("imagenet")


def test_seeded_init_is_deterministic():
    a, b, c = GgnnModel(SMALL, seed=9), GgnnModel(SMALL, seed=9), GgnnModel(SMALL, seed=10)
    sa, sb, sc = a.store.state(), b.store.state(), c.store.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_save_load_round_trip(tmp_path):
    m = GgnnModel(SMALL, seed=11)
    p = tmp_path / "m.ckpt"
    m.save(str(p), {"epoch": 3})
    r = GgnnModel.load(str(p), expect_n=10)
    assert r.config == SMALL and r.extra == {"epoch": 3}
    assert np.array_equal(r.logits([graph(0)]), m.logits([graph(0)]))
    with pytest.raises(ConfigError):
        GgnnModel.load(str(p), expect_n=8)


def test_mixed_n_batch_rejected():
    from strokegraph.graphenc import EncodingConfig

    g8 = encode_from_points([np.random.default_rng(0).random((8, 2))], [], EncodingConfig(n=8))
    with pytest.raises(ConfigError):
        batch_graphs([graph(0), g8])
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**SMALL.to_dict(), "bogus": 1})


def test_frozen_stops_parameter_gradients():
    m = GgnnModel(SMALL)
    for _, p in m.store.items():
        p.requires_grad = True
    x = Tensor(np.stack(random_stroke_points(np.random.default_rng(1), 1, 10, 40, 260)), requires_grad=True)
    with m.frozen():
        with Tape() as tape:
            lg, _ = m.forward_points(x, [])
            loss = ops.sum(lg)
        tape.backward(loss)
    assert x.grad is not None
    assert all(p.grad is None for _, p in m.store.items())
    assert all(p.requires_grad for _, p in m.store.items())
