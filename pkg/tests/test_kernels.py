import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from strokegraph import kernels
from strokegraph._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def test_bar_thins_to_single_row():
    m = np.zeros((20, 40), bool)
    m[8:13, 5:35] = True
    t = kernels.thin_mask(m)
    assert t.any(axis=1).sum() == 1


def test_thin_output_has_no_2x2_blocks():
    m = np.zeros((41, 41), bool)
    m[18:23, 4:37] = True
    m[4:37, 18:23] = True
    t = kernels.thin_mask(m).astype(int)
    blocks = t[:-1, :-1] + t[1:, :-1] + t[:-1, 1:] + t[1:, 1:]
    assert blocks.max() < 4


def test_thin_preserves_connectivity():
    from scipy import ndimage

    m = np.zeros((41, 41), bool)
    m[18:23, 4:37] = True
    m[4:37, 18:23] = True
    t = kernels.thin_mask(m)
    assert ndimage.label(t, structure=np.ones((3, 3)))[1] == 1
    assert np.all(m[t])


def test_crossing_number_simple_cases():
    assert kernels.crossing_number(0) == 0
    assert kernels.crossing_number(0b1) == 1  # only N
    assert kernels.crossing_number(0b10001) == 2  # N and S


@needs_numba
@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, (24, 24)))
def test_thin_backends_agree(mask):
    assert np.array_equal(kernels.thin_mask(mask, "numba"), kernels.thin_mask(mask, "numpy"))


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 63), st.floats(0, 63)), min_size=2, max_size=8))
def test_draw_backends_agree(pts):
    poly = [np.array(pts)]
    assert np.array_equal(
        kernels.draw_polylines((64, 64), poly, "numba"), kernels.draw_polylines((64, 64), poly, "numpy")
    )


@needs_numba
def test_warp_backends_agree():
    rng = np.random.default_rng(0)
    img = (rng.random((50, 50)) > 0.7).astype(float)
    a = np.deg2rad(17)
    inv = np.array([[np.cos(a), np.sin(a), -3.2], [-np.sin(a), np.cos(a), 4.1]])
    assert np.array_equal(kernels.warp_nearest(img, inv, "numba"), kernels.warp_nearest(img, inv, "numpy"))


def test_draw_horizontal_segment():
    c = kernels.draw_polylines((5, 10), [np.array([[1.0, 2.0], [8.0, 2.0]])])
    assert c[2, 1:9].all() and c.sum() == 8


def test_draw_is_8_connected():
    from scipy import ndimage

    c = kernels.draw_polylines((40, 40), [np.array([[2.0, 3.0], [37.0, 29.0], [5.0, 36.0]])])
    assert ndimage.label(c > 0, structure=np.ones((3, 3)))[1] == 1


def test_warp_identity_and_integer_shift():
    rng = np.random.default_rng(1)
    img = rng.random((12, 15))
    ident = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    assert np.array_equal(kernels.warp_nearest(img, ident), img)
    shift = np.array([[1.0, 0, -2], [0, 1.0, -3]])  # output (x, y) reads source (x-2, y-3)
    out = kernels.warp_nearest(img, shift)
    assert np.array_equal(out[3:, 2:], img[:-3, :-2])
    assert not out[:3].any() and not out[:, :2].any()


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.thin_mask(np.zeros((3, 3), bool), "cuda")


@needs_numba
def test_env_flag_selects_numpy_backend():
    import subprocess
    import sys

    code = "from strokegraph._accel import DEFAULT_BACKEND; print(DEFAULT_BACKEND)"
    env = {**os.environ, "STROKEGRAPH_PURE_NUMPY": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env.pop("STROKEGRAPH_PURE_NUMPY")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"


@needs_numba
def test_benchmark_script_runs(capsys):
    import runpy

    mod = runpy.run_path(os.path.join(os.path.dirname(__file__), "..", "benchmarks", "bench_kernels.py"))
    mod["main"](["--repeat", "1"])
    out = capsys.readouterr().out
    assert out.count("True") == 3
