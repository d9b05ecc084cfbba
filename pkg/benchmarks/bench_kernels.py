"""Time the numba kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

The numpy path is what runs when STROKEGRAPH_PURE_NUMPY=1 is set. Each
kernel is warmed up once (numba compiles on first call) and then timed on
the same inputs for both backends; outputs are checked for equality.
"""

import argparse
import timeit

import numpy as np
from scipy import ndimage

from strokegraph import kernels
from strokegraph.robustness import rotation
from strokegraph.sketchio import disk


def workloads(seed: int = 0):
    rng = np.random.default_rng(seed)
    polys = [np.cumsum(rng.normal(0, 12, (40, 2)), axis=0) + 152 for _ in range(4)]
    ink = kernels.draw_polylines((304, 304), polys, "numpy") > 0
    mask = ndimage.binary_dilation(ink, structure=disk(4))
    c = np.array([151.5, 151.5])
    rt = rotation(17.0).T
    inv = np.zeros((2, 3))
    inv[:, :2] = rt
    inv[:, 2] = c - rt @ (c + np.array([2.0, -1.0]))
    img = mask.astype(np.float64)
    return {
        "thin_mask 304x304": lambda b: kernels.thin_mask(mask, b),
        "draw_polylines 4x40 pts": lambda b: kernels.draw_polylines((304, 304), polys, b),
        "warp_nearest 304x304": lambda b: kernels.warp_nearest(img, inv, b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  equal")
    for name, fn in workloads().items():
        equal = np.array_equal(fn("numpy"), fn("numba"))  # also warms up numba
        t_np = min(timeit.repeat(lambda: fn("numpy"), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn("numba"), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:26s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x  {equal}")


if __name__ == "__main__":
    main()
