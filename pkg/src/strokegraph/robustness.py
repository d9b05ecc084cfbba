"""Spatial-robustness grids, the histogram structure penalty and
gradient-based control-point / topology attacks."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, StrokeGraphError, UsageError
from .graphenc import EncodingConfig, encode_from_points
from .mpnn import GgnnModel
from .ndgrad import Adam, Tape, Tensor, ops
from .sketchio import RasterImage
from .strokeparse import Stroke, StrokeSet, extract

log = logging.getLogger(__name__)

CANVAS = 304  # 224 + 2 * 40


def image_center(size: int = CANVAS) -> np.ndarray:
    c = (size - 1) / 2.0
    return np.array([c, c])


# ------------------------------------------------------------------ grid


@dataclass(frozen=True)
class TransformGrid:
    rotation_max: float = 30.0  # degrees
    tx_max: float = 3.0  # pixels
    ty_max: float = 3.0
    rotation_samples: int = 31
    translation_samples: int = 5

    def __post_init__(self):
        if self.rotation_samples < 1 or self.translation_samples < 1:
            raise ConfigError("grid sample counts must be >= 1")

    @classmethod
    def mnist(cls) -> "TransformGrid":
        return cls(30.0, 3.0, 3.0, 31, 5)

    @classmethod
    def quickdraw(cls) -> "TransformGrid":
        return cls(30.0, 10.0, 10.0, 31, 5)

    @classmethod
    def identity(cls) -> "TransformGrid":
        return cls(0.0, 0.0, 0.0, 1, 1)

    @property
    def size(self) -> int:
        return self.rotation_samples * self.translation_samples**2

    def transforms(self) -> np.ndarray:
        """``(size, 3)`` rows of (degrees, dx, dy); rotation varies slowest."""
        def axis(bound, k):
            return np.linspace(-bound, bound, k) if k > 1 else np.zeros(1)

        th = axis(self.rotation_max, self.rotation_samples)
        tx = axis(self.tx_max, self.translation_samples)
        ty = axis(self.ty_max, self.translation_samples)
        g = np.stack(np.meshgrid(th, tx, ty, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)


def rotation(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def apply_transform_points(points, degrees: float, dx: float, dy: float, center=None) -> np.ndarray:
    """``p' = R (p - c) + c + (dx, dy)`` about the image centre ``c``."""
    p = np.asarray(points, dtype=np.float64)
    c = image_center() if center is None else np.asarray(center, dtype=np.float64)
    return (p - c) @ rotation(degrees).T + c + np.array([dx, dy])


def apply_transform_raster(image: RasterImage, degrees: float, dx: float, dy: float, backend=None) -> RasterImage:
    """Nearest-neighbour warp by the same map as :func:`apply_transform_points`."""
    h, w = image.height, image.width
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rt = rotation(degrees).T
    # source = R^T (dest - c - d) + c
    inv = np.zeros((2, 3))
    inv[:, :2] = rt
    inv[:, 2] = c - rt @ (c + np.array([dx, dy]))
    return RasterImage(kernels.warp_nearest(image.pixels, inv, backend))


def junction_pairs(strokes: StrokeSet) -> np.ndarray:
    pairs = sorted({(min(i, j), max(i, j)) for i, _, j, _ in strokes.junctions if i != j})
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass
class SampleVerdict:
    index: int
    label: int
    clean_prediction: int
    robust: bool
    failures: int  # transforms misclassified (or failed to extract)
    extraction_failures: int = 0
    predictions: np.ndarray | None = None  # per transform


@dataclass
class RobustnessReport:
    grid: TransformGrid
    mode: str
    verdicts: list[SampleVerdict]

    @property
    def robustness(self) -> float:
        return sum(v.robust for v in self.verdicts) / max(1, len(self.verdicts))

    @property
    def accuracy(self) -> float:
        return sum(v.clean_prediction == v.label for v in self.verdicts) / max(1, len(self.verdicts))

    def to_text(self) -> str:
        lines = [
            f"mode\t{self.mode}",
            f"transforms_per_sample\t{self.grid.size}",
            f"samples\t{len(self.verdicts)}",
            f"accuracy\t{self.accuracy:.6f}",
            f"robustness\t{self.robustness:.6f}",
            "index\tlabel\tclean_pred\trobust\tfailures\textraction_failures",
        ]
        for v in self.verdicts:
            lines.append(
                f"{v.index}\t{v.label}\t{v.clean_prediction}\t{int(v.robust)}\t{v.failures}\t{v.extraction_failures}"
            )
        return "\n".join(lines) + "\n"


def _points_verdict(model, k, strokes: StrokeSet, label, transforms, config) -> SampleVerdict:
    pts = strokes.points()
    graphs = [
        encode_from_points(list(apply_transform_points(pts, *t)), strokes.junctions, config)
        for t in transforms
    ]
    clean = int(model.predict([encode_from_points(list(pts), strokes.junctions, config)])[0])
    pred = model.predict(graphs)
    bad = int((pred != label).sum())
    return SampleVerdict(k, label, clean, bad == 0, bad, 0, pred)


def _raster_verdict(model, k, image: RasterImage, label, transforms, config, backend) -> SampleVerdict:
    from .graphenc import encode

    def classify(img):
        strokes = extract(img, config, backend)
        if len(strokes) == 0:
            raise StrokeGraphError("no strokes")
        return int(model.predict([encode(strokes, config)])[0])

    try:
        clean = classify(image)
    except StrokeGraphError:
        clean = -1
    preds, ext_fail = [], 0
    for t in transforms:
        try:
            preds.append(classify(apply_transform_raster(image, *t, backend=backend)))
        except StrokeGraphError as exc:
            log.info("sample %d transform %s: extraction failed (%s)", k, tuple(t), exc)
            ext_fail += 1
            preds.append(-1)
    pred = np.array(preds)
    bad = int((pred != label).sum())
    return SampleVerdict(k, label, clean, bad == 0, bad, ext_fail, pred)


def spatial_robustness(
    model: GgnnModel,
    samples: Sequence,
    labels: Sequence[int],
    grid: TransformGrid,
    mode: str = "points",
    config: EncodingConfig | None = None,
    backend: str | None = None,
    jobs: int = 1,
) -> RobustnessReport:
    """A sample is robust when every grid transform is classified correctly.

    ``samples`` are :class:`StrokeSet` objects in ``points`` mode (transforms
    act on the control points, then re-encode) and padded, normalized
    :class:`RasterImage` objects in ``raster`` mode (warp, re-extract,
    re-encode).
    """
    config = config or EncodingConfig()
    transforms = grid.transforms()
    if mode not in ("points", "raster"):
        raise ConfigError(f"unknown robustness mode {mode!r}")
    fn = _points_verdict if mode == "points" else _raster_verdict
    extra = () if mode == "points" else (backend,)
    args = [(model, k, s, int(y), transforms, config) + extra for k, (s, y) in enumerate(zip(samples, labels))]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            verdicts = list(pool.map(_call, [(fn, a) for a in args]))
    else:
        verdicts = [fn(*a) for a in args]
    return RobustnessReport(grid, mode, verdicts)


def _call(job):
    fn, args = job
    return fn(*args)


@dataclass
class SweepRow:
    degrees: float
    label: int  # -1 when extraction failed
    confidence: float
    status: str = "ok"


def rotation_sweep_report(
    model: GgnnModel,
    image: RasterImage,
    angles: Sequence[float],
    config: EncodingConfig | None = None,
    backend: str | None = None,
) -> list[SweepRow]:
    from .graphenc import encode

    config = config or EncodingConfig()
    rows = []
    for a in angles:
        try:
            strokes = extract(apply_transform_raster(image, a, 0.0, 0.0, backend), config, backend)
            if len(strokes) == 0:
                raise StrokeGraphError("no strokes")
            p = model.predict_proba([encode(strokes, config)])[0]
            rows.append(SweepRow(float(a), int(np.argmax(p)), float(p.max())))
        except StrokeGraphError as exc:
            rows.append(SweepRow(float(a), -1, 0.0, f"failed:{type(exc).__name__}"))
    return rows


def sweep_to_text(rows: Sequence[SweepRow]) -> str:
    lines = ["degrees\tlabel\tconfidence\tstatus"]
    lines += [f"{r.degrees:g}\t{r.label}\t{r.confidence:.6f}\t{r.status}" for r in rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------- structure penalty


def _intra_upper(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


@dataclass
class StructurePenaltyModel:
    """Histogram log-likelihood of stroke statistics under a reference set.

    Distances use ``distance_bins`` uniform bins over ``[0, diagonal]``,
    angles ``angle_bins`` over ``[0, pi]``. Lookups interpolate linearly
    between bin-centre log masses so the penalty is differentiable.
    """

    lambdas: tuple[float, float, float] = (1e-5, 1e-5, 0.1)
    distance_bins: int = 64
    angle_bins: int = 36
    canvas: int = CANVAS
    smoothing: float = 1e-6
    log_intra: np.ndarray | None = None
    log_inter: np.ndarray | None = None
    log_angle: np.ndarray | None = None
    counts: tuple[int, int, int] = (0, 0, 0)

    @property
    def diagonal(self) -> float:
        return math.sqrt(2.0) * self.canvas

    @property
    def fitted(self) -> bool:
        return self.log_intra is not None

    def _log_mass(self, values: np.ndarray, bins: int, hi: float) -> np.ndarray:
        h, _ = np.histogram(np.clip(values, 0.0, hi), bins=bins, range=(0.0, hi))
        p = h / h.sum() if h.sum() > 0 else np.full(bins, 1.0 / bins)
        p = p + self.smoothing
        return np.log(p / p.sum())

    def fit(self, samples: Sequence[tuple[np.ndarray, np.ndarray]]) -> "StructurePenaltyModel":
        """``samples`` holds ``(points (S, n, 2), junction pairs (E, 2))``."""
        intra, inter, ang = [], [], []
        for pts, pairs in samples:
            pts = np.asarray(pts, dtype=np.float64)
            if len(pts) == 0:
                continue
            iu, ju = _intra_upper(pts.shape[1])
            s = np.arange(len(pts))
            intra.append(ops.pair_distances(pts, s, s).data[:, iu, ju].ravel())
            pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            if len(pairs):
                inter.append(ops.pair_distances(pts, pairs[:, 0], pairs[:, 1]).data.ravel())
            ang.append(ops.turning_angles(pts).data.ravel())
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
        intra, inter, ang = cat(intra), cat(inter), cat(ang)
        self.log_intra = self._log_mass(intra, self.distance_bins, self.diagonal)
        self.log_inter = self._log_mass(inter, self.distance_bins, self.diagonal)
        self.log_angle = self._log_mass(ang, self.angle_bins, math.pi)
        self.counts = (len(intra), len(inter), len(ang))
        return self

    def penalty(self, points, pairs) -> Tensor:
        """Differentiable penalty for one sketch ``(S, n, 2)``."""
        if not self.fitted:
            raise UsageError("structure penalty model has not been fitted")
        p = points if isinstance(points, Tensor) else Tensor(points)
        n = p.shape[1]
        l1, l2, l3 = self.lambdas
        dw = self.diagonal / self.distance_bins
        s = np.arange(p.shape[0])
        iu, ju = _intra_upper(n)
        intra = ops.reshape(ops.pair_distances(p, s, s), (p.shape[0], n * n))
        flat = iu * n + ju
        intra = ops.index(intra, (slice(None), flat))
        total = ops.mul(ops.mean(ops.interp_table(intra, self.log_intra, 0.0, dw)), -l1)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs):
            inter = ops.pair_distances(p, pairs[:, 0], pairs[:, 1])
            total = ops.add(total, ops.mul(ops.mean(ops.interp_table(inter, self.log_inter, 0.0, dw)), -l2))
        ang = ops.turning_angles(p)
        aw = math.pi / self.angle_bins
        return ops.add(total, ops.mul(ops.mean(ops.interp_table(ang, self.log_angle, 0.0, aw)), -l3))

    def to_dict(self) -> dict:
        if not self.fitted:
            raise UsageError("structure penalty model has not been fitted")
        return {
            "lambdas": list(self.lambdas),
            "distance_bins": self.distance_bins,
            "angle_bins": self.angle_bins,
            "canvas": self.canvas,
            "smoothing": self.smoothing,
            "counts": list(self.counts),
            "log_intra": self.log_intra.tolist(),
            "log_inter": self.log_inter.tolist(),
            "log_angle": self.log_angle.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructurePenaltyModel":
        m = cls(
            tuple(d["lambdas"]), d["distance_bins"], d["angle_bins"], d["canvas"], d["smoothing"],
            np.array(d["log_intra"]), np.array(d["log_inter"]), np.array(d["log_angle"]), tuple(d["counts"]),
        )
        return m

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> "StructurePenaltyModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def structure_penalty(strokes, penalty_model: StructurePenaltyModel) -> float:
    """Penalty of a :class:`StrokeSet` (or ``(points, pairs)`` tuple)."""
    if isinstance(strokes, StrokeSet):
        pts, pairs = strokes.points(), junction_pairs(strokes)
    else:
        pts, pairs = strokes
    return penalty_model.penalty(np.asarray(pts, dtype=np.float64), pairs).item()


def fit_penalty(stroke_sets: Sequence[StrokeSet], **kw) -> StructurePenaltyModel:
    return StructurePenaltyModel(**kw).fit(
        [(s.points(), junction_pairs(s)) for s in stroke_sets if len(s)]
    )


def penalty_for_target(
    labeled_sets: Sequence[tuple[int, StrokeSet]], target: int, stroke_count: int, minimum: int = 5, **kw
) -> StructurePenaltyModel:
    """Fit the penalty on the target class restricted to ``stroke_count``
    strokes, falling back to the whole target class and then to everything
    when fewer than ``minimum`` sketches qualify."""
    for pick in (
        lambda y, s: y == target and len(s) == stroke_count,
        lambda y, s: y == target,
        lambda y, s: True,
    ):
        sel = [s for y, s in labeled_sets if pick(y, s)]
        if len(sel) >= minimum:
            return fit_penalty(sel, **kw)
    raise UsageError("not enough reference sketches to fit the structure penalty")


# ------------------------------------------------------------------ attacks


@dataclass
class AttackConfig:
    target: int
    max_steps: int = 2000
    step_size: float = 0.5
    threshold: float = 0.9
    box: tuple[float, float, float, float] = (0.0, 0.0, CANVAS - 1.0, CANVAS - 1.0)  # x0, y0, x1, y1
    log_steps: tuple[int, ...] = (0, 100, 1000)
    log_every: int = 0  # extra periodic records; 0 = off

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("attack threshold must lie in (0, 1)")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")


@dataclass
class TraceRecord:
    step: int
    label: int
    confidence: float
    target_confidence: float
    points: np.ndarray  # (S, n, 2)


@dataclass
class AttackTrace:
    target: int
    records: list[TraceRecord] = field(default_factory=list)
    success: bool = False
    steps: int = 0
    reason: str = ""
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def to_lines(self) -> list[str]:
        out = []
        for r in self.records:
            out.append(json.dumps({
                "step": r.step,
                "label": r.label,
                "confidence": round(r.confidence, 6),
                "target_confidence": round(r.target_confidence, 6),
                "points": [round(float(v), 6) for v in r.points.ravel()],
            }))
        return out

    def summary(self) -> dict:
        f = self.final
        return {"target": self.target, "success": self.success, "steps": self.steps, "reason": self.reason,
                "final_label": f.label, "final_target_confidence": round(f.target_confidence, 6)}

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.summary()) + "\n")
            for line in self.to_lines():
                fh.write(line + "\n")


def render_points(points: np.ndarray, size: int = CANVAS, backend=None) -> np.ndarray:
    return kernels.draw_polylines((size, size), [np.asarray(p) for p in points], backend)


def save_png(pixels: np.ndarray, path: str) -> None:
    from PIL import Image

    Image.fromarray((255 - np.clip(pixels, 0, 1) * 255).astype(np.uint8)).save(path)


def write_snapshots(trace: AttackTrace, out_dir: str, stem: str = "step") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for r in trace.records:
        p = os.path.join(out_dir, f"{stem}_{r.step:05d}.png")
        save_png(render_points(r.points), p)
        paths.append(p)
    return paths


def _optimize(model, points, pairs, free_mask, target, penalty_model, config) -> AttackTrace:
    """Projected Adam descent on the entries of ``points`` selected by
    ``free_mask``; the rest stay fixed."""
    x0, y0, x1, y1 = config.box
    lo = np.array([x0, y0])
    hi = np.array([x1, y1])
    pts = np.clip(np.array(points, dtype=np.float64), lo, hi)
    trace = AttackTrace(target, pairs=pairs)
    opt = Adam(lr=config.step_size)
    state_m = np.zeros_like(pts)
    state_v = np.zeros_like(pts)
    y = np.array([target])

    def record(step, probs):
        trace.records.append(TraceRecord(step, int(np.argmax(probs)), float(probs.max()),
                                         float(probs[target]), pts.copy()))

    with model.frozen():
        for step in range(config.max_steps + 1):
            x = Tensor(pts, requires_grad=True)
            with Tape() as tape:
                logits, _ = model.forward_points(x, pairs)
                loss = ops.softmax_cross_entropy(logits, y)
                if penalty_model is not None:
                    loss = ops.add(loss, penalty_model.penalty(x, pairs))
            probs = ops.softmax(logits.data)[0]
            done = int(np.argmax(probs)) == target and (probs[target] >= config.threshold or step == 0)
            last = done or step == config.max_steps
            if step in config.log_steps or last or (config.log_every and step % config.log_every == 0):
                record(step, probs)
            if done:
                trace.success, trace.steps, trace.reason = True, step, "reached target"
                return trace
            if last:
                break
            tape.backward(loss)
            g = np.where(free_mask, x.grad, 0.0)
            if not np.any(g):
                if not trace.records or trace.records[-1].step != step:
                    record(step, probs)
                trace.steps, trace.reason = step, "no gradient signal"
                return trace
            # Adam on the free coordinates only
            t = step + 1
            state_m = opt.beta1 * state_m + (1 - opt.beta1) * g
            state_v = opt.beta2 * state_v + (1 - opt.beta2) * g * g
            mh = state_m / (1 - opt.beta1**t)
            vh = state_v / (1 - opt.beta2**t)
            pts = np.clip(pts - config.step_size * mh / (np.sqrt(vh) + opt.eps) * free_mask, lo, hi)
    trace.steps, trace.reason = config.max_steps, "step limit"
    return trace


def attack_points(
    model: GgnnModel,
    strokes: StrokeSet,
    target: int,
    penalty_model: StructurePenaltyModel | None,
    config: AttackConfig | None = None,
) -> AttackTrace:
    """Move every control point to push the prediction to ``target``."""
    config = config or AttackConfig(target)
    pts = strokes.points()
    return _optimize(model, pts, junction_pairs(strokes), np.ones_like(pts, dtype=bool),
                     target, penalty_model, config)


def topmost_endpoint(strokes: StrokeSet) -> tuple[int, int]:
    """(stroke, flag) of the free end with the smallest y (then x)."""
    best = None
    for i, s in enumerate(strokes.strokes):
        for flag, p in ((0, s.control_points[0]), (1, s.control_points[-1])):
            key = (p[1], p[0])
            if best is None or key < best[0]:
                best = (key, i, flag)
    if best is None:
        raise UsageError("sketch has no strokes")
    return best[1], best[2]


def add_stroke(strokes: StrokeSet, attach: tuple[int, int]) -> StrokeSet:
    """Append a stroke whose n points all sit on the chosen endpoint."""
    i, flag = attach
    if not 0 <= i < len(strokes):
        raise UsageError(f"attachment stroke {i} out of range")
    base = strokes.strokes[i].control_points
    anchor = base[0] if flag == 0 else base[-1]
    new = Stroke(np.repeat(anchor[None, :], len(base), axis=0))
    k = len(strokes)
    return StrokeSet(
        strokes.strokes + [new],
        strokes.junctions + [(i, flag, k, 0)],
        list(strokes.start_flags) + [1],
    )


def attack_topology(
    model: GgnnModel,
    strokes: StrokeSet,
    target: int,
    penalty_model: StructurePenaltyModel | None,
    config: AttackConfig | None = None,
    attach: tuple[int, int] | None = None,
) -> AttackTrace:
    """Add one stroke starting at an endpoint (the topmost by default) and
    optimize its n-1 free points; the existing strokes stay fixed."""
    config = config or AttackConfig(target)
    aug = add_stroke(strokes, attach if attach is not None else topmost_endpoint(strokes))
    pts = aug.points()
    mask = np.zeros_like(pts, dtype=bool)
    mask[-1, 1:] = True
    return _optimize(model, pts, junction_pairs(aug), mask, target, penalty_model, config)


__all__ = [
    "CANVAS",
    "TransformGrid",
    "apply_transform_points",
    "apply_transform_raster",
    "spatial_robustness",
    "RobustnessReport",
    "SampleVerdict",
    "rotation_sweep_report",
    "sweep_to_text",
    "StructurePenaltyModel",
    "structure_penalty",
    "fit_penalty",
    "penalty_for_target",
    "junction_pairs",
    "AttackConfig",
    "AttackTrace",
    "TraceRecord",
    "attack_points",
    "attack_topology",
    "add_stroke",
    "topmost_endpoint",
    "write_snapshots",
    "render_points",
    "save_png",
]
