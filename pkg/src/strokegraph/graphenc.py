"""Isometry-invariant graph encoding of a stroke set.

Each stroke becomes a vertex carrying the ``n x n`` matrix of Euclidean
distances among its own control points; each pair of strokes that meet at a
junction becomes an edge carrying the ``n x n`` matrix of distances from the
first stroke's points (rows) to the second's (columns). Row/column order
follows each stroke's start -> end order, so flipping a stroke permutes its
matrices.

Edges are stored once per unordered pair as ``(i, j)`` with ``i < j``; the
matrix for the opposite orientation is the transpose. Matrices are flattened
row-major over ``(p, q)`` wherever a vector is needed.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ChecksumError, ConfigError, FormatError, VersionError


@dataclass(frozen=True)
class EncodingConfig:
    n: int = 10
    junction_tolerance: float = 2.0
    # extraction knobs (see strokeparse.extract)
    min_stroke_length: float = 5.0
    spur_ratio: float = 1.5
    spline_spacing: float = 16.0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")


@dataclass
class StrokeGraph:
    vertex_features: np.ndarray  # (V, n, n)
    edge_index: np.ndarray  # (E, 2) int, i < j
    edge_features: np.ndarray  # (E, n, n), rows index stroke i
    label: int = -1
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.vertex_features.shape[1]

    @property
    def num_vertices(self) -> int:
        return self.vertex_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[0]

    @property
    def adjacency(self) -> set[frozenset]:
        return {frozenset((int(i), int(j))) for i, j in self.edge_index}

    def edge_matrix(self, i: int, j: int) -> np.ndarray:
        """Distance matrix with rows from stroke ``i`` and columns from ``j``."""
        for k, (a, b) in enumerate(self.edge_index):
            if a == i and b == j:
                return self.edge_features[k]
            if a == j and b == i:
                return self.edge_features[k].T
        raise KeyError((i, j))

    def allclose(self, other: "StrokeGraph", atol: float = 1e-9) -> bool:
        return (
            self.vertex_features.shape == other.vertex_features.shape
            and np.array_equal(self.edge_index, other.edge_index)
            and np.allclose(self.vertex_features, other.vertex_features, rtol=0, atol=atol)
            and np.allclose(self.edge_features, other.edge_features, rtol=0, atol=atol)
        )


def pairwise_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("coordinates must be finite")
    return float(np.sqrt(((a - b) ** 2).sum()))


def distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def infer_junctions(point_sets: Sequence[np.ndarray], tolerance: float) -> list[tuple[int, int, int, int]]:
    """Endpoint pairs of different strokes lying within ``tolerance``."""
    out = []
    for i in range(len(point_sets)):
        for j in range(i + 1, len(point_sets)):
            for fi, pi in ((0, point_sets[i][0]), (1, point_sets[i][-1])):
                for fj, pj in ((0, point_sets[j][0]), (1, point_sets[j][-1])):
                    if pairwise_distance(pi, pj) <= tolerance:
                        out.append((i, fi, j, fj))
    return out


def junction_edges(junctions, num_strokes: int) -> np.ndarray:
    pairs = set()
    for i, _, j, _ in junctions:
        if i == j:
            continue
        if not (0 <= i < num_strokes and 0 <= j < num_strokes):
            raise ConfigError(f"junction references stroke outside 0..{num_strokes - 1}")
        pairs.add((min(i, j), max(i, j)))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def encode_from_points(
    point_sets: Sequence[np.ndarray],
    junctions=None,
    config: EncodingConfig | None = None,
    label: int = -1,
) -> StrokeGraph:
    """Encode ordered control-point arrays directly. ``junctions=None``
    infers them from endpoint proximity within ``config.junction_tolerance``."""
    config = config or EncodingConfig()
    pts = [np.asarray(p, dtype=np.float64) for p in point_sets]
    for k, p in enumerate(pts):
        if p.shape != (config.n, 2):
            raise ConfigError(f"stroke {k} has shape {p.shape}, expected ({config.n}, 2)")
    if junctions is None:
        junctions = infer_junctions(pts, config.junction_tolerance)
    edges = junction_edges(junctions, len(pts))
    verts = np.stack([distance_matrix(p, p) for p in pts]) if pts else np.zeros((0, config.n, config.n))
    efeat = np.stack([distance_matrix(pts[i], pts[j]) for i, j in edges]) if len(edges) else np.zeros((0, config.n, config.n))
    return StrokeGraph(verts, edges, efeat, label)


def encode(strokes, config: EncodingConfig | None = None, label: int = -1) -> StrokeGraph:
    """Encode a :class:`~strokegraph.strokeparse.StrokeSet`."""
    return encode_from_points(
        [s.control_points for s in strokes.strokes], strokes.junctions, config, label
    )


# --------------------------------------------------------------- file format

GRAPH_MAGIC = b"SGGRPH"
GRAPH_VERSION = 1


def dumps_graph(graph: StrokeGraph) -> bytes:
    """Layout (little-endian)::

        magic "SGGRPH" | u16 version | u32 n | u32 V | u32 E | i32 label
        V x n x n f64 vertex matrices
        E x (u32 i, u32 j)
        E x n x n f64 edge matrices (rows = stroke i)
        u32 crc32 of everything above
    """
    buf = io.BytesIO()
    buf.write(GRAPH_MAGIC)
    buf.write(struct.pack("<HIIIi", GRAPH_VERSION, graph.n, graph.num_vertices, graph.num_edges, graph.label))
    buf.write(np.ascontiguousarray(graph.vertex_features, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(graph.edge_index, dtype="<u4").tobytes())
    buf.write(np.ascontiguousarray(graph.edge_features, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads_graph(data: bytes) -> StrokeGraph:
    if not data.startswith(GRAPH_MAGIC) or len(data) < len(GRAPH_MAGIC) + 22:
        raise FormatError("not a graph file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("graph file checksum mismatch")
    off = len(GRAPH_MAGIC)
    version, n, nv, ne, label = struct.unpack_from("<HIIIi", body, off)
    if version != GRAPH_VERSION:
        raise VersionError(f"graph file version {version} unsupported (expected {GRAPH_VERSION})")
    off += 18
    expect = off + 8 * nv * n * n + 8 * ne + 8 * ne * n * n
    if expect != len(body):
        raise FormatError(f"graph file payload is {len(body) - off} bytes, header implies {expect - off}")
    verts = np.frombuffer(body, "<f8", nv * n * n, off).reshape(nv, n, n).astype(np.float64)
    off += 8 * nv * n * n
    eidx = np.frombuffer(body, "<u4", 2 * ne, off).reshape(ne, 2).astype(np.int64)
    off += 8 * ne
    efeat = np.frombuffer(body, "<f8", ne * n * n, off).reshape(ne, n, n).astype(np.float64)
    return StrokeGraph(verts, eidx, efeat, label)


def save_graph(path: str, graph: StrokeGraph) -> None:
    with open(path, "wb") as f:
        f.write(dumps_graph(graph))


def load_graph(path: str) -> StrokeGraph:
    with open(path, "rb") as f:
        return loads_graph(f.read())
