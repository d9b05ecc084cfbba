import json

import numpy as np
import pytest

from helpers import random_stroke_points
from strokegraph.errors import ConfigError, UsageError
from strokegraph.mpnn import GgnnModel, ModelConfig
from strokegraph.robustness import (
    CANVAS,
    AttackConfig,
    StructurePenaltyModel,
    TransformGrid,
    add_stroke,
    apply_transform_points,
    apply_transform_raster,
    attack_points,
    attack_topology,
    fit_penalty,
    spatial_robustness,
    structure_penalty,
    topmost_endpoint,
    write_snapshots,
)
from strokegraph.sketchio import RasterImage, normalize_pad_dilate
from strokegraph.strokeparse import Stroke, StrokeSet

SMALL = ModelConfig(n=10, hidden_dim=100, phi1_dims=(16,), phi2_dims=(16,), phi3_dims=(16,),
                    feature_dim=8, class_count=4)
C = (CANVAS - 1) / 2.0


def two_strokes(seed=0):
    rng = np.random.default_rng(seed)
    a, b = random_stroke_points(rng, 2)
    b[0] = a[-1]
    return StrokeSet([Stroke(a), Stroke(b)], [(0, 1, 1, 0)], [0, 0])


def test_point_transform_examples():
    p = np.array([[C + 10, C], [C, C]])
    assert np.allclose(apply_transform_points(p, 0, 0, 0), p)
    assert np.allclose(apply_transform_points(p, 90, 0, 0), [[C, C + 10], [C, C]])
    assert np.allclose(apply_transform_points(p, 0, 2, -3), p + [2, -3])
    q = apply_transform_points(p, 17, 1.5, -2)
    back = apply_transform_points(q - [1.5, -2], -17, 0, 0)
    assert np.allclose(back, p)


def test_raster_transform_follows_the_point_map():
    img = np.zeros((CANVAS, CANVAS))
    img[100, 180] = 1.0  # row y=100, column x=180
    for deg, dx, dy in [(90, 0, 0), (0, 3, -2), (180, 1, 1)]:
        out = apply_transform_raster(RasterImage(img), deg, dx, dy).pixels
        ys, xs = np.nonzero(out)
        expect = apply_transform_points([[180, 100]], deg, dx, dy)[0]
        assert (xs.tolist(), ys.tolist()) == ([round(expect[0])], [round(expect[1])])


def test_half_turn_twice_restores_mnist(mnist_samples):
    for s in mnist_samples[:20]:
        img = normalize_pad_dilate(s.image)
        back = apply_transform_raster(apply_transform_raster(img, 180, 0, 0), 180, 0, 0)
        ink = img.pixels > 0
        assert (back.pixels[ink] > 0).mean() >= 0.99
        assert (back.pixels == img.pixels).mean() >= 0.99


def test_grid_sizes():
    g = TransformGrid.mnist()
    t = g.transforms()
    assert g.size == 775 and t.shape == (775, 3)
    assert t[:, 0].min() == -30 and t[:, 0].max() == 30
    assert set(np.round(t[:, 1], 6)) == {-3, -1.5, 0, 1.5, 3}
    assert np.all(t[:25, 0] == -30)  # rotation varies slowest
    assert TransformGrid.identity().transforms().tolist() == [[0.0, 0.0, 0.0]]
    assert TransformGrid.quickdraw().transforms()[:, 1].max() == 10
    with pytest.raises(ConfigError):
        TransformGrid(rotation_samples=0)


def test_identity_grid_robustness_equals_accuracy():
    m = GgnnModel(SMALL, seed=1)
    sets = [two_strokes(s) for s in range(6)]
    labels = [0, 1, 2, 3, 0, 1]
    rep = spatial_robustness(m, sets, labels, TransformGrid.identity())
    assert rep.robustness == rep.accuracy
    assert "transforms_per_sample\t1" in rep.to_text()
    with pytest.raises(ConfigError):
        spatial_robustness(m, sets, labels, TransformGrid.identity(), mode="voxels")


def test_penalty_requires_fit():
    with pytest.raises(UsageError):
        StructurePenaltyModel().penalty(np.zeros((1, 10, 2)), [])


def _rigid(pts, deg, t):
    return apply_transform_points(pts, deg, *t)


def test_penalty_is_isometry_invariant():
    ref = [two_strokes(s) for s in range(20)]
    pm = fit_penalty(ref)
    s = two_strokes(99)
    pairs = [(0, 1)]
    base = structure_penalty((s.points(), pairs), pm)
    for deg, t in [(37, (5, -8)), (-120, (0, 0)), (180, (-3, 2))]:
        moved = _rigid(s.points(), deg, t)
        assert structure_penalty((moved, pairs), pm) == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_random_points_score_worse_than_real(mnist_samples):
    from strokegraph.cache import sketch_to_graph

    sets = []
    for s in mnist_samples[:60]:
        strokes, _ = sketch_to_graph(s.image)
        if len(strokes):
            sets.append(strokes)
    pm = fit_penalty(sets)
    real = np.median([structure_penalty(s, pm) for s in sets])
    rng = np.random.default_rng(0)
    noise = [structure_penalty((np.stack(random_stroke_points(rng, 2, 10, 0, 303)), [(0, 1)]), pm)
             for _ in range(20)]
    assert min(noise) > real


def test_penalty_round_trip(tmp_path):
    pm = fit_penalty([two_strokes(s) for s in range(5)])
    p = tmp_path / "pen.json"
    pm.save(str(p))
    r = StructurePenaltyModel.load(str(p))
    s = two_strokes(7)
    assert structure_penalty(s, r) == structure_penalty(s, pm)


def test_attack_on_current_label_stops_at_step_zero():
    m = GgnnModel(SMALL, seed=2)
    s = two_strokes(3)
    from strokegraph.graphenc import encode

    cur = int(m.predict([encode(s)])[0])
    tr = attack_points(m, s, cur, None, AttackConfig(cur))
    assert tr.success and tr.steps == 0 and len(tr.records) == 1
    assert np.array_equal(tr.final.points, s.points())


def test_zero_step_topology_attack_changes_nothing():
    m = GgnnModel(SMALL, seed=2)
    s = two_strokes(4)
    from strokegraph.graphenc import encode

    cur = int(m.predict([encode(s)])[0])
    target = (cur + 1) % 4
    tr = attack_topology(m, s, target, None, AttackConfig(target, max_steps=0))
    assert not tr.success and tr.steps == 0 and tr.reason == "step limit"
    pts = tr.final.points
    assert pts.shape == (3, 10, 2)
    assert np.array_equal(pts[:2], s.points())
    end = topmost_endpoint(s)
    anchor = s.strokes[end[0]].control_points[0 if end[1] == 0 else -1]
    assert np.all(pts[2] == anchor)


def test_topology_attack_moves_only_the_new_stroke():
    m = GgnnModel(SMALL, seed=5)
    s = two_strokes(5)
    from strokegraph.graphenc import encode

    target = (int(m.predict([encode(s)])[0]) + 1) % 4
    tr = attack_topology(m, s, target, None, AttackConfig(target, max_steps=20))
    pts = tr.final.points
    assert np.array_equal(pts[:2], s.points())
    assert np.array_equal(pts[2, 0], add_stroke(s, topmost_endpoint(s)).points()[2, 0])


def test_attack_respects_box(tmp_path):
    m = GgnnModel(SMALL, seed=6)
    s = two_strokes(6)
    from strokegraph.graphenc import encode

    target = (int(m.predict([encode(s)])[0]) + 1) % 4
    box = (100.0, 100.0, 180.0, 180.0)
    tr = attack_points(m, s, target, None, AttackConfig(target, max_steps=30, step_size=5.0, box=box, log_every=5))
    for r in tr.records:
        assert r.points.min() >= 100.0 and r.points.max() <= 180.0
    tr.write(str(tmp_path / "t.jsonl"))
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["target"] == target and len(lines) == len(tr.records) + 1
    assert len(write_snapshots(tr, str(tmp_path / "png"))) == len(tr.records)


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(0, threshold=1.5)
    with pytest.raises(UsageError):
        add_stroke(two_strokes(0), (5, 0))
