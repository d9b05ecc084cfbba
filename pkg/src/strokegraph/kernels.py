"""Hot raster kernels with a numba path and a pure-numpy path.

Every public kernel dispatches on ``backend`` (``"numba"`` or ``"numpy"``;
``None`` means the process default from :mod:`strokegraph._accel`). The two
paths share lookup tables and arithmetic order so their outputs are equal
bit-for-bit, which the test-suite checks.

Neighbourhood bit order used throughout (clockwise from north)::

    p8 p1 p2        bit0 = N,  bit1 = NE, bit2 = E,  bit3 = SE
    p7  .  p3       bit4 = S,  bit5 = SW, bit6 = W,  bit7 = NW
    p6 p5 p4
"""

from __future__ import annotations

import numpy as np

from ._accel import DEFAULT_BACKEND, HAVE_NUMBA, njit

# (row, col) offsets for bits 0..7
NEIGHBOR_OFFSETS = np.array(
    [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)],
    dtype=np.int64,
)


def _bits(code: int) -> list[int]:
    return [(code >> k) & 1 for k in range(8)]


def crossing_number(code: int) -> int:
    """Number of distinct 8-connected foreground runs around a pixel."""
    p = _bits(code)
    c = 0
    for i in range(4):
        a, b, d = p[2 * i], p[2 * i + 1], p[(2 * i + 2) % 8]
        c += int((not a) and (b or d))
    return c


def _build_thin_luts() -> tuple[np.ndarray, np.ndarray]:
    # Guo-Hall two-subiteration parallel thinning
    lut1 = np.zeros(256, dtype=np.bool_)
    lut2 = np.zeros(256, dtype=np.bool_)
    for code in range(256):
        p = _bits(code)
        if crossing_number(code) != 1:
            continue
        n1 = sum(p[2 * k] | p[2 * k + 1] for k in range(4))
        n2 = sum(p[2 * k + 1] | p[(2 * k + 2) % 8] for k in range(4))
        if not 2 <= min(n1, n2) <= 3:
            continue
        p1, p2, p3, p4, p5, p6, p7, p8 = p
        if ((p1 | p2 | (1 - p4)) & p3) == 0:
            lut1[code] = True
        if ((p5 | p6 | (1 - p8)) & p7) == 0:
            lut2[code] = True
    return lut1, lut2


def _build_cleanup_lut() -> np.ndarray:
    # Removes corner pixels of 2x2 blocks left behind by the parallel passes:
    # pixel stays simple (one run), is not an endpoint, and has two
    # 4-adjacent neighbours that are themselves 8-adjacent.
    lut = np.zeros(256, dtype=np.bool_)
    for code in range(256):
        p = _bits(code)
        if crossing_number(code) != 1 or sum(p) < 2:
            continue
        n, ne, e, se, s, sw, w, nw = p
        if (n and e) or (e and s) or (s and w) or (w and n):
            lut[code] = True
    return lut


THIN_LUT_1, THIN_LUT_2 = _build_thin_luts()
CLEANUP_LUT = _build_cleanup_lut()
CROSSING_LUT = np.array([crossing_number(c) for c in range(256)], dtype=np.int64)
POPCOUNT_LUT = np.array([bin(c).count("1") for c in range(256)], dtype=np.int64)


def _resolve(backend: str | None) -> str:
    backend = backend or DEFAULT_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        return "numpy"
    return backend


# --------------------------------------------------------------------------
# neighbourhood codes


def neighbor_codes(mask: np.ndarray) -> np.ndarray:
    """8-bit neighbourhood code for every pixel of a boolean mask."""
    m = np.pad(mask.astype(np.uint8), 1)
    h, w = mask.shape
    code = np.zeros((h, w), dtype=np.int64)
    for k, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        code |= m[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w].astype(np.int64) << k
    return code


# --------------------------------------------------------------------------
# thinning


def _thin_numpy(mask: np.ndarray, lut1, lut2, cleanup) -> np.ndarray:
    img = mask.copy()
    while True:
        changed = False
        for lut in (lut1, lut2):
            kill = img & lut[neighbor_codes(img)]
            if kill.any():
                img[kill] = False
                changed = True
        if not changed:
            break
    # sequential raster-order cleanup; must match the numba loop exactly
    while True:
        changed = False
        rows, cols = np.nonzero(img & cleanup[neighbor_codes(img)])
        for r, c in zip(rows, cols):
            code = 0
            for k in range(8):
                rr = r + NEIGHBOR_OFFSETS[k, 0]
                cc = c + NEIGHBOR_OFFSETS[k, 1]
                if 0 <= rr < img.shape[0] and 0 <= cc < img.shape[1] and img[rr, cc]:
                    code |= 1 << k
            if img[r, c] and cleanup[code]:
                img[r, c] = False
                changed = True
        if not changed:
            break
    return img


@njit(cache=True)
def _code_at(img, r, c, offs):
    h, w = img.shape
    code = 0
    for k in range(8):
        rr = r + offs[k, 0]
        cc = c + offs[k, 1]
        if rr >= 0 and rr < h and cc >= 0 and cc < w and img[rr, cc]:
            code |= 1 << k
    return code


@njit(cache=True)
def _thin_numba(mask, lut1, lut2, cleanup, offs):
    img = mask.copy()
    h, w = img.shape
    kill_r = np.empty(h * w, dtype=np.int64)
    kill_c = np.empty(h * w, dtype=np.int64)
    while True:
        changed = False
        for sub in range(2):
            lut = lut1 if sub == 0 else lut2
            nk = 0
            for r in range(h):
                for c in range(w):
                    if img[r, c] and lut[_code_at(img, r, c, offs)]:
                        kill_r[nk] = r
                        kill_c[nk] = c
                        nk += 1
            for i in range(nk):
                img[kill_r[i], kill_c[i]] = False
            if nk > 0:
                changed = True
        if not changed:
            break
    while True:
        nk = 0
        for r in range(h):
            for c in range(w):
                if img[r, c] and cleanup[_code_at(img, r, c, offs)]:
                    kill_r[nk] = r
                    kill_c[nk] = c
                    nk += 1
        changed = False
        for i in range(nk):
            r = kill_r[i]
            c = kill_c[i]
            if img[r, c] and cleanup[_code_at(img, r, c, offs)]:
                img[r, c] = False
                changed = True
        if not changed:
            break
    return img


def thin_mask(mask: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Parallel two-subiteration thinning of a boolean mask to a 1-px skeleton."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _resolve(backend) == "numba":
        return _thin_numba(mask, THIN_LUT_1, THIN_LUT_2, CLEANUP_LUT, NEIGHBOR_OFFSETS)
    return _thin_numpy(mask, THIN_LUT_1, THIN_LUT_2, CLEANUP_LUT)


# --------------------------------------------------------------------------
# polyline rasterisation (DDA with round-half-even)


def _segment_pixels(x0, y0, x1, y1):
    steps = int(max(abs(np.rint(x1) - np.rint(x0)), abs(np.rint(y1) - np.rint(y0))))
    if steps == 0:
        return np.array([np.rint(x0)], dtype=np.int64), np.array([np.rint(y0)], dtype=np.int64)
    t = np.arange(steps + 1, dtype=np.float64) / steps
    xs = np.rint(x0 + t * (x1 - x0)).astype(np.int64)
    ys = np.rint(y0 + t * (y1 - y0)).astype(np.int64)
    return xs, ys


def _draw_numpy(canvas, xs, ys, starts):
    h, w = canvas.shape
    for k in range(len(starts) - 1):
        a, b = starts[k], starts[k + 1]
        if b - a == 1:
            segs = [(xs[a], ys[a], xs[a], ys[a])]
        else:
            segs = [(xs[i], ys[i], xs[i + 1], ys[i + 1]) for i in range(a, b - 1)]
        for x0, y0, x1, y1 in segs:
            px, py = _segment_pixels(x0, y0, x1, y1)
            ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
            canvas[py[ok], px[ok]] = 1.0
    return canvas


@njit(cache=True)
def _draw_segment_numba(canvas, x0, y0, x1, y1):
    h, w = canvas.shape
    steps = int(max(abs(np.rint(x1) - np.rint(x0)), abs(np.rint(y1) - np.rint(y0))))
    if steps == 0:
        px = int(np.rint(x0))
        py = int(np.rint(y0))
        if px >= 0 and px < w and py >= 0 and py < h:
            canvas[py, px] = 1.0
        return
    for i in range(steps + 1):
        t = i / steps
        px = int(np.rint(x0 + t * (x1 - x0)))
        py = int(np.rint(y0 + t * (y1 - y0)))
        if px >= 0 and px < w and py >= 0 and py < h:
            canvas[py, px] = 1.0


@njit(cache=True)
def _draw_numba(canvas, xs, ys, starts):
    for k in range(len(starts) - 1):
        a = starts[k]
        b = starts[k + 1]
        if b - a == 1:
            _draw_segment_numba(canvas, xs[a], ys[a], xs[a], ys[a])
        else:
            for i in range(a, b - 1):
                _draw_segment_numba(canvas, xs[i], ys[i], xs[i + 1], ys[i + 1])
    return canvas


def draw_polylines(
    shape: tuple[int, int], polylines: list[np.ndarray], backend: str | None = None
) -> np.ndarray:
    """Rasterise polylines (each an ``(k, 2)`` array of x, y) as 1-px lines."""
    canvas = np.zeros(shape, dtype=np.float64)
    if not polylines:
        return canvas
    pts = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polylines])
    starts = np.cumsum([0] + [len(p) for p in polylines]).astype(np.int64)
    xs = np.ascontiguousarray(pts[:, 0])
    ys = np.ascontiguousarray(pts[:, 1])
    if _resolve(backend) == "numba":
        return _draw_numba(canvas, xs, ys, starts)
    return _draw_numpy(canvas, xs, ys, starts)


# --------------------------------------------------------------------------
# inverse-mapped nearest-neighbour warp


def _warp_numpy(image, inv):
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    ix = np.rint(sx)
    iy = np.rint(sy)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros_like(image)
    out[ok] = image[iy[ok].astype(np.int64), ix[ok].astype(np.int64)]
    return out


@njit(cache=True)
def _warp_numba(image, inv):
    h, w = image.shape
    out = np.zeros_like(image)
    for r in range(h):
        for c in range(w):
            x = float(c)
            y = float(r)
            sx = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2]
            sy = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2]
            ix = np.rint(sx)
            iy = np.rint(sy)
            if ix >= 0 and ix < w and iy >= 0 and iy < h:
                out[r, c] = image[int(iy), int(ix)]
    return out


def warp_nearest(image: np.ndarray, inverse: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Resample ``image`` at ``inverse @ (x, y, 1)`` for every output pixel.

    ``inverse`` is the 2x3 affine map from output to source pixel coordinates.
    Source locations outside the image read as background 0.
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    inverse = np.ascontiguousarray(inverse, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _warp_numba(image, inverse)
    return _warp_numpy(image, inverse)


__all__ = [
    "NEIGHBOR_OFFSETS",
    "CROSSING_LUT",
    "POPCOUNT_LUT",
    "crossing_number",
    "neighbor_codes",
    "thin_mask",
    "draw_polylines",
    "warp_nearest",
]
