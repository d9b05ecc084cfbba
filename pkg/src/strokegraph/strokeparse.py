"""Raster sketch -> ordered strokes of ``n`` control points.

Pipeline: thin the binary foreground, find fork pixels on the skeleton, merge
forks whose maximal inscribed circles overlap, walk the skeleton into branch
polylines, drop negligible branches, orient and order the survivors
left-to-right / top-to-bottom, then resample each one from a least-squares
cubic B-spline.

Coordinates are ``(x, y)`` = ``(column, row)`` in pixels, y pointing down.
"""

from __future__ import annotations

import io
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import BSpline

from . import kernels
from .errors import ChecksumError, ConfigError, EmptySketchError, FormatError, VersionError
from .graphenc import EncodingConfig
from .sketchio import RasterImage

log = logging.getLogger(__name__)

# 4-neighbours first so the walk prefers axis steps over diagonal shortcuts
_STEPS = ((0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass
class Skeleton:
    mask: np.ndarray
    foreground: np.ndarray | None = None

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def on_pixels(self) -> set[tuple[int, int]]:
        """Skeleton pixels as ``(x, y)`` tuples."""
        rr, cc = np.nonzero(self.mask)
        return set(zip(cc.tolist(), rr.tolist()))


@dataclass
class ForkPoint:
    position: tuple[float, float]
    degree: int
    pixels: list[tuple[int, int]] = field(default_factory=list)
    radii: list[float] = field(default_factory=list)


@dataclass
class Branch:
    """A traced skeleton path between two nodes (forks or endpoints)."""

    points: np.ndarray  # (k, 2) float x, y
    start_node: int  # index into the node list, -1 for a closed loop with no node
    end_node: int
    internal: bool = False

    @property
    def length(self) -> float:
        return polyline_length(self.points)


@dataclass
class Stroke:
    control_points: np.ndarray  # (n, 2)

    @property
    def start(self) -> np.ndarray:
        return self.control_points[0]

    @property
    def end(self) -> np.ndarray:
        return self.control_points[-1]

    @property
    def n(self) -> int:
        return len(self.control_points)


@dataclass
class StrokeSet:
    strokes: list[Stroke]
    # (stroke i, end flag of i, stroke j, end flag of j); flag 0 = start, 1 = end
    junctions: list[tuple[int, int, int, int]] = field(default_factory=list)
    # per-stroke: 1 if the stroke's start sits on a fork rather than a free end
    start_flags: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.strokes)

    def points(self) -> np.ndarray:
        return np.stack([s.control_points for s in self.strokes])


def polyline_length(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    return float(np.sqrt((np.diff(pts, axis=0) ** 2).sum(axis=1)).sum())


# ------------------------------------------------------------------ thinning


def thin(image: RasterImage, threshold: float = 0.5, backend: str | None = None) -> Skeleton:
    fg = image.foreground(threshold)
    if not fg.any():
        raise EmptySketchError("cannot thin an image without foreground")
    return Skeleton(kernels.thin_mask(fg, backend=backend), fg)


# ----------------------------------------------------------- pixel topology


def _pixel_links(mask: np.ndarray) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """8-adjacency between skeleton pixels (row, col) with redundant diagonal
    links dropped: a diagonal step is removed when the two pixels already
    share an on 4-neighbour, so each pixel's link count equals the number of
    branches leaving it."""
    h, w = mask.shape
    links: dict[tuple[int, int], list[tuple[int, int]]] = {}
    rr, cc = np.nonzero(mask)
    for r, c in zip(rr.tolist(), cc.tolist()):
        out = []
        for dr, dc in _STEPS:
            r2, c2 = r + dr, c + dc
            if not (0 <= r2 < h and 0 <= c2 < w and mask[r2, c2]):
                continue
            if dr != 0 and dc != 0 and (mask[r, c2] or mask[r2, c]):
                continue
            out.append((r2, c2))
        links[(r, c)] = out
    return links


class _UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def detect_and_merge_forks(skeleton: Skeleton) -> list[ForkPoint]:
    """Fork clusters (degree >= 3) followed by endpoints (degree 1).

    Fork candidates whose maximal inscribed circles in the foreground overlap
    are merged into one fork located at the radius-weighted centroid.
    """
    links = _pixel_links(skeleton.mask)
    fg = skeleton.foreground if skeleton.foreground is not None else skeleton.mask
    dist = ndimage.distance_transform_edt(fg)

    cands = sorted(p for p, nb in links.items() if len(nb) >= 3)
    ends = sorted(p for p, nb in links.items() if len(nb) == 1)
    radii = np.array([max(float(dist[p]), 1.0) for p in cands])
    uf = _UnionFind(len(cands))
    if cands:
        pos = np.array(cands, dtype=np.float64)
        diff = pos[:, None, :] - pos[None, :, :]
        d = np.sqrt((diff**2).sum(-1))
        touch = d < radii[:, None] + radii[None, :]
        for i, j in zip(*np.nonzero(np.triu(touch, 1))):
            uf.union(int(i), int(j))
    groups: dict[int, list[int]] = {}
    for i in range(len(cands)):
        groups.setdefault(uf.find(i), []).append(i)

    forks = []
    for members in sorted(groups.values()):
        px = [cands[i] for i in members]
        wts = radii[members]
        rc = (np.array(px, dtype=np.float64) * wts[:, None]).sum(0) / wts.sum()
        member_set = set(px)
        outgoing = sum(1 for p in px for q in links[p] if q not in member_set)
        forks.append(
            ForkPoint(
                position=(float(rc[1]), float(rc[0])),
                degree=max(outgoing, 3),
                pixels=[(c, r) for r, c in px],
                radii=[float(x) for x in wts],
            )
        )
    forks.sort(key=lambda f: (f.position[0], f.position[1]))
    endpoints = [ForkPoint(position=(float(c), float(r)), degree=1, pixels=[(c, r)], radii=[float(dist[r, c])]) for r, c in ends]
    endpoints.sort(key=lambda f: f.position)
    return forks + endpoints


# ------------------------------------------------------------------- tracing


def _inside_circles(points: np.ndarray, node: ForkPoint) -> bool:
    centers = np.array(node.pixels, dtype=np.float64)
    radii = np.array(node.radii)
    d = np.sqrt(((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    return bool(np.all((d <= radii[None, :]).any(axis=1)))


def _loop_orientation(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def trace_strokes(skeleton: Skeleton, forks: list[ForkPoint]) -> list[Branch]:
    """Partition the skeleton into branches between fork clusters/endpoints.

    Every skeleton link is walked exactly once. Branches running between two
    pixels of one fork cluster and staying inside its inscribed circles are
    flagged ``internal``. Node-free cycles start at their topmost-then-leftmost
    pixel and run clockwise. Branch direction and order are *not* final here;
    :func:`orient_and_order` settles them.
    """
    mask = skeleton.mask
    links = _pixel_links(mask)
    owner: dict[tuple[int, int], int] = {}
    for k, node in enumerate(forks):
        for x, y in node.pixels:
            owner[(y, x)] = k
    used: set[frozenset] = set()
    branches: list[Branch] = []

    def walk(a, b):
        path = [a, b]
        used.add(frozenset((a, b)))
        cur = b
        while cur not in owner:
            nxt = [q for q in links[cur] if frozenset((cur, q)) not in used]
            if not nxt:
                break
            used.add(frozenset((cur, nxt[0])))
            cur = nxt[0]
            path.append(cur)
            if cur == a:
                break
        return path

    for k in range(len(forks)):
        for y, x in sorted((y, x) for x, y in forks[k].pixels):
            p = (y, x)
            for q in links.get(p, []):
                if frozenset((p, q)) in used:
                    continue
                path = walk(p, q)
                end = owner.get(path[-1], -1)
                pts = np.array([(c, r) for r, c in path], dtype=np.float64)
                internal = end == k and forks[k].degree >= 3 and _inside_circles(pts, forks[k])
                branches.append(Branch(pts, k, end, internal))

    # node-free cycles
    remaining = sorted(p for p in links if any(frozenset((p, q)) not in used for q in links[p]))
    for p in remaining:
        free = [q for q in links[p] if frozenset((p, q)) not in used]
        if not free:
            continue
        path = walk(p, free[0])
        pts = np.array([(c, r) for r, c in path], dtype=np.float64)
        branches.append(Branch(pts, -1, -1, False))

    isolated = [p for p, nb in links.items() if not nb]
    for r, c in isolated:
        log.warning("dropping isolated skeleton pixel at (%d, %d)", c, r)
    return branches


def _attach_fork_centres(branches: list[Branch], forks: list[ForkPoint]) -> None:
    for br in branches:
        if br.internal:
            continue
        for side, node in ((0, br.start_node), (-1, br.end_node)):
            if node < 0 or forks[node].degree < 3:
                continue
            centre = np.array(forks[node].position)
            if np.any(br.points[side] != centre):
                br.points = (
                    np.vstack([centre, br.points]) if side == 0 else np.vstack([br.points, centre])
                )


def _merge_degree_two(branches: list[Branch], forks: list[ForkPoint]) -> list[Branch]:
    """Join branches through forks left with exactly two incident branch ends."""
    branches = list(branches)
    changed = True
    while changed:
        changed = False
        incidence: dict[int, list[tuple[int, int]]] = {}
        for bi, br in enumerate(branches):
            for side, node in ((0, br.start_node), (1, br.end_node)):
                if node >= 0 and forks[node].degree >= 3:
                    incidence.setdefault(node, []).append((bi, side))
        for node in sorted(incidence):
            ends = incidence[node]
            if len(ends) == 1:
                # single surviving branch: the fork is now a free end
                forks[node] = ForkPoint(forks[node].position, 1, forks[node].pixels, forks[node].radii)
                changed = True
                break
            if len(ends) != 2:
                continue
            (b1, s1), (b2, s2) = ends
            if b1 == b2:
                # closed loop through a former fork
                br = branches[b1]
                branches[b1] = Branch(br.points, -1, -1)
                forks[node] = ForkPoint(forks[node].position, 2, forks[node].pixels, forks[node].radii)
                changed = True
                break
            p1 = branches[b1].points if s1 == 1 else branches[b1].points[::-1]
            p2 = branches[b2].points if s2 == 0 else branches[b2].points[::-1]
            n1 = branches[b1].start_node if s1 == 1 else branches[b1].end_node
            n2 = branches[b2].end_node if s2 == 0 else branches[b2].start_node
            joined = np.vstack([p1, p2[1:]]) if np.all(p1[-1] == p2[0]) else np.vstack([p1, p2])
            forks[node] = ForkPoint(forks[node].position, 2, forks[node].pixels, forks[node].radii)
            keep = [b for i, b in enumerate(branches) if i not in (b1, b2)]
            keep.append(Branch(joined, n1, n2))
            branches = keep
            changed = True
            break
    return branches


def _lex_key(p: np.ndarray) -> tuple[float, float]:
    return (float(p[0]), float(p[1]))


def _orient(points: np.ndarray, kind: str) -> tuple[np.ndarray, bool]:
    """Orient a polyline; returns the points and whether they were reversed.

    ``kind`` is ``"open"`` (start = lexicographically smaller end under
    (x, y)), ``"anchored"`` (loop through a fork, start stays at the fork) or
    ``"free"`` (node-free loop, restarted at its topmost-then-leftmost pixel).
    Loops run clockwise on screen.
    """
    if kind == "open":
        if _lex_key(points[-1]) < _lex_key(points[0]):
            return points[::-1], True
        return points, False
    pts = points
    if kind == "free":
        ring = points[:-1] if np.all(points[0] == points[-1]) and len(points) > 2 else points
        k = min(range(len(ring)), key=lambda i: (ring[i, 1], ring[i, 0]))
        ring = np.roll(ring, -k, axis=0)
        pts = np.vstack([ring, ring[:1]])
    if _loop_orientation(pts) < 0:
        return pts[::-1], True
    return pts, False


# ------------------------------------------------------------ spline fitting


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(np.diff(points, axis=0) != 0, axis=1)
    return points[keep]


def fit_resample(polyline: np.ndarray, n: int = 10, spacing: float = 16.0) -> Stroke:
    """Least-squares cubic B-spline fit (chord-length parameters, clamped
    uniform knots) sampled at ``n`` uniform parameters on [0, 1]."""
    if n < 2:
        raise ConfigError("n must be >= 2")
    pts = _dedupe(np.asarray(polyline, dtype=np.float64).reshape(-1, 2))
    if len(pts) < 2:
        raise FormatError("polyline needs at least 2 distinct points")
    seg = np.sqrt((np.diff(pts, axis=0) ** 2).sum(axis=1))
    u = np.concatenate([[0.0], np.cumsum(seg)])
    total = u[-1]
    u /= total
    s = np.linspace(0.0, 1.0, n)
    if len(pts) < 4:
        out = np.column_stack([np.interp(s, u, pts[:, 0]), np.interp(s, u, pts[:, 1])])
        return Stroke(out)
    k = 3
    m = int(np.clip(round(total / spacing) + k, k + 1, len(pts)))
    interior = np.linspace(0.0, 1.0, m - k + 1)[1:-1]
    knots = np.concatenate([np.zeros(k + 1), interior, np.ones(k + 1)])
    basis = BSpline.design_matrix(u, knots, k).toarray()
    coef, *_ = np.linalg.lstsq(basis, pts, rcond=None)
    out = BSpline(knots, coef, k)(s)
    return Stroke(np.asarray(out, dtype=np.float64))


# ----------------------------------------------------------------- pipeline


def orient_and_order(
    polylines: list[np.ndarray],
    kinds: list[str],
) -> tuple[list[int], list[np.ndarray], list[bool]]:
    """Orient each polyline and sort by start point (x, then y).

    Returns the permutation (new -> old index), oriented polylines and a
    reversed flag per output polyline.
    """
    oriented = [_orient(p, k) for p, k in zip(polylines, kinds)]

    def key(i):
        pts = oriented[i][0]
        second = pts[1] if len(pts) > 1 else pts[0]
        return (_lex_key(pts[0]), _lex_key(second), len(pts))

    order = sorted(range(len(polylines)), key=key)
    return order, [oriented[i][0] for i in order], [oriented[i][1] for i in order]


def extract(image: RasterImage, config: EncodingConfig | None = None, backend: str | None = None) -> StrokeSet:
    """Full raster -> StrokeSet pipeline."""
    config = config or EncodingConfig()
    skel = thin(image, backend=backend)
    forks = detect_and_merge_forks(skel)
    branches = [b for b in trace_strokes(skel, forks) if not b.internal]
    _attach_fork_centres(branches, forks)

    # negligible strokes, then spurs hanging off forks
    branches = [b for b in branches if b.length >= config.min_stroke_length]
    branches = _merge_degree_two(branches, forks)
    while config.spur_ratio > 0:
        spurs = []
        for bi, br in enumerate(branches):
            for fork, free in ((br.start_node, br.end_node), (br.end_node, br.start_node)):
                if fork < 0 or free < 0 or forks[fork].degree < 3 or forks[free].degree != 1:
                    continue
                if br.length < config.spur_ratio * max(forks[fork].radii):
                    spurs.append(bi)
        if not spurs:
            break
        drop = min(spurs, key=lambda i: (branches[i].length, i))
        branches = _merge_degree_two([b for i, b in enumerate(branches) if i != drop], forks)
    if not branches:
        raise EmptySketchError("every traced stroke was shorter than the minimum stroke length")

    kinds = []
    for b in branches:
        if b.start_node < 0 and b.end_node < 0:
            kinds.append("free")
        elif b.start_node == b.end_node:
            kinds.append("anchored")
        else:
            kinds.append("open")
    order, oriented, flipped = orient_and_order([b.points for b in branches], kinds)

    strokes = [fit_resample(p, config.n, config.spline_spacing) for p in oriented]
    # node ids at each oriented end
    ends = []
    for old, rev in zip(order, flipped):
        b = branches[old]
        s_node, e_node = (b.end_node, b.start_node) if rev else (b.start_node, b.end_node)
        ends.append((s_node, e_node))

    at_fork: dict[int, list[tuple[int, int]]] = {}
    for si, (s_node, e_node) in enumerate(ends):
        for flag, node in ((0, s_node), (1, e_node)):
            if node >= 0 and forks[node].degree >= 3:
                at_fork.setdefault(node, []).append((si, flag))
    junctions = set()
    for members in at_fork.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                (i, fi), (j, fj) = sorted((members[a], members[b]))
                if i != j:
                    junctions.add((i, fi, j, fj))
    start_flags = [int(s >= 0 and forks[s].degree >= 3) for s, _ in ends]
    return StrokeSet(strokes, sorted(junctions), start_flags)


# --------------------------------------------------------------- file format

STROKE_MAGIC = b"SGSTRK"
STROKE_VERSION = 1


def dumps_strokes(strokes: StrokeSet) -> bytes:
    """Serialise a StrokeSet. Layout (little-endian)::

        magic "SGSTRK" | u16 version | u32 n | u32 stroke_count
        per stroke:   u8 start_flag | n x (f64 x, f64 y)
        u32 junction_count
        per junction: u32 i | u8 end_i | u32 j | u8 end_j
        u32 crc32 of everything above
    """
    n = strokes.strokes[0].n if strokes.strokes else 0
    flags = strokes.start_flags or [0] * len(strokes.strokes)
    buf = io.BytesIO()
    buf.write(STROKE_MAGIC)
    buf.write(struct.pack("<HII", STROKE_VERSION, n, len(strokes.strokes)))
    for s, flag in zip(strokes.strokes, flags):
        if s.n != n:
            raise ConfigError("all strokes in a file must share n")
        buf.write(struct.pack("<B", flag))
        buf.write(np.ascontiguousarray(s.control_points, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(strokes.junctions)))
    for i, fi, j, fj in strokes.junctions:
        buf.write(struct.pack("<IBIB", i, fi, j, fj))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads_strokes(data: bytes) -> StrokeSet:
    if len(data) < len(STROKE_MAGIC) + 14 or not data.startswith(STROKE_MAGIC):
        raise FormatError("not a stroke file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("stroke file checksum mismatch")
    off = len(STROKE_MAGIC)
    version, n, count = struct.unpack_from("<HII", body, off)
    if version != STROKE_VERSION:
        raise VersionError(f"stroke file version {version} unsupported (expected {STROKE_VERSION})")
    off += 10
    strokes, flags = [], []
    for _ in range(count):
        (flag,) = struct.unpack_from("<B", body, off)
        off += 1
        pts = np.frombuffer(body, dtype="<f8", count=2 * n, offset=off).reshape(n, 2).astype(np.float64)
        off += 16 * n
        strokes.append(Stroke(pts))
        flags.append(flag)
    (jc,) = struct.unpack_from("<I", body, off)
    off += 4
    junctions = []
    for _ in range(jc):
        junctions.append(struct.unpack_from("<IBIB", body, off))
        off += 10
    if off != len(body):
        raise FormatError("trailing bytes in stroke file")
    return StrokeSet(strokes, [tuple(int(v) for v in j) for j in junctions], flags)


def save_strokes(path: str, strokes: StrokeSet) -> None:
    with open(path, "wb") as f:
        f.write(dumps_strokes(strokes))


def load_strokes(path: str) -> StrokeSet:
    with open(path, "rb") as f:
        return loads_strokes(f.read())
