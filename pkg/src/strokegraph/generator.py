"""Novel single-stroke sketch classes separable from a reference set.

Alternates two fits, as in the discriminator/generator scheme:

* a logistic head on frozen features ``z`` learns to tell the reference set
  D (label 1) from candidates drawn from ``N(t, sigma^2)`` (label 0);
* ``t`` and ``sigma`` descend ``-E log(1 - head(z(t + sigma * eps))) +
  penalty`` with reparameterized samples.

State lives in MNIST image units (a 28-unit box); ``to_pixels`` maps a unit
``u`` to ``40 + 8 u``, the canvas of the extraction pipeline.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .graphenc import EncodingConfig, StrokeGraph, encode_from_points
from .mpnn import GgnnModel
from .ndgrad import Tape, Tensor, ops
from .robustness import StructurePenaltyModel

UNIT_SCALE = 8.0
UNIT_OFFSET = 40.0
UNIT_BOX = (0.0, 28.0)


def to_pixels(u):
    return UNIT_OFFSET + UNIT_SCALE * np.asarray(u, dtype=np.float64)


def to_units(p):
    return (np.asarray(p, dtype=np.float64) - UNIT_OFFSET) / UNIT_SCALE


@dataclass
class GenerationConfig:
    n: int = 10
    init_low: float = 4.0
    init_high: float = 24.0
    sigma_init: float = 4.0
    sigma_floor: float = 0.1
    alpha: float = 0.5  # generator step
    gamma: float = 1e-2  # head step
    candidates: int = 16  # per generator step
    head_samples: int = 64  # candidates per head fit
    reference_batch: int = 256
    head_max_steps: int = 500
    plateau_tol: float = 1e-4
    plateau_window: int = 10
    generator_steps: int = 20  # per outer iteration
    max_iterations: int = 300
    loss_window: int = 10  # iterations per plateau window
    loss_tol: float = 0.01
    accept_accuracy: float = 0.9
    patience: int = 3  # consecutive accepted checks to stop
    export_samples: int = 100  # per accepted digit
    loss: str = "bce"  # or "hinge"

    def __post_init__(self):
        if self.sigma_floor <= 0 or self.sigma_init <= 0:
            raise ConfigError("sigma values must be > 0")
        if self.alpha < 0 or self.gamma <= 0:
            raise ConfigError("alpha must be >= 0 and gamma > 0")
        if self.loss not in ("bce", "hinge"):
            raise ConfigError(f"unknown generation loss {self.loss!r}")


@dataclass
class GenerationState:
    t: np.ndarray  # (n, 2) mean control points, MNIST units
    sigma: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.t = np.clip(np.asarray(self.t, dtype=np.float64), *UNIT_BOX)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma <= 0):
            raise ConfigError("sigma must be > 0")

    @classmethod
    def initial(cls, rng: np.random.Generator, config: GenerationConfig) -> "GenerationState":
        t = rng.uniform(config.init_low, config.init_high, size=(config.n, 2))
        return cls(t, np.full((config.n, 2), config.sigma_init))

    def mean_points_px(self) -> np.ndarray:
        return to_pixels(self.t)


@dataclass
class NoveltyHead:
    """``P(reference | z) = sigmoid(w . (z - mu) / s + b)``; ``mu``/``s``
    standardize features and are fixed once set."""

    w: np.ndarray
    b: float = 0.0
    mu: np.ndarray | None = None
    s: np.ndarray | None = None

    @classmethod
    def zeros(cls, dim: int) -> "NoveltyHead":
        return cls(np.zeros(dim))

    def _std(self, z):
        return (z - self.mu) / self.s if self.mu is not None else z

    def logits(self, z: np.ndarray) -> np.ndarray:
        return self._std(np.asarray(z)) @ self.w + self.b

    def proba(self, z: np.ndarray) -> np.ndarray:
        return expit(self.logits(z))

    def logit_tensor(self, z: Tensor) -> Tensor:
        zs = z
        if self.mu is not None:
            zs = ops.mul(ops.sub(z, self.mu), 1.0 / self.s)
        return ops.add(ops.matmul(zs, self.w[:, None]), self.b)

    def accuracy(self, z_ref: np.ndarray, z_gen: np.ndarray) -> float:
        hits = (self.proba(z_ref) >= 0.5).sum() + (self.proba(z_gen) < 0.5).sum()
        return float(hits / (len(z_ref) + len(z_gen)))


def sample_candidates(state: GenerationState, count: int, seed_or_rng) -> np.ndarray:
    """``(count, n, 2)`` draws from ``N(t, sigma^2)``, clamped to the box
    (MNIST units)."""
    rng = np.random.default_rng(seed_or_rng) if not isinstance(seed_or_rng, np.random.Generator) else seed_or_rng
    eps = rng.standard_normal((count,) + state.t.shape)
    return np.clip(state.t + state.sigma * eps, *UNIT_BOX)


def candidate_graphs(cands_units: np.ndarray, config: EncodingConfig | None = None, label: int = -1) -> list[StrokeGraph]:
    return [encode_from_points([to_pixels(c)], [], config, label) for c in cands_units]


def _features_of_points(model: GgnnModel, pts_px) -> Tensor:
    """Single-stroke graphs stacked as strokes of a union graph."""
    k = pts_px.shape[0]
    _, z = model.forward_points(pts_px, [], graph_ids=np.arange(k), num_graphs=k)
    return z


def features_of_candidates(model: GgnnModel, cands_units: np.ndarray) -> np.ndarray:
    return _features_of_points(model, to_pixels(cands_units)).data


def _head_loss(head: NoveltyHead, z_ref, z_gen) -> tuple[float, np.ndarray, float]:
    zr, zg = head._std(z_ref), head._std(z_gen)
    lr, lg = zr @ head.w + head.b, zg @ head.w + head.b
    # -mean log p(ref) - mean log(1 - p(gen))
    loss = np.logaddexp(0, -lr).mean() + np.logaddexp(0, lg).mean()
    pr, pg = expit(lr), expit(lg)
    gw = -(zr * (1 - pr)[:, None]).mean(0) + (zg * pg[:, None]).mean(0)
    gb = -(1 - pr).mean() + pg.mean()
    return float(loss), gw, float(gb)


def fit_discriminator(
    head: NoveltyHead,
    z_ref: np.ndarray,
    z_gen: np.ndarray,
    gamma: float = 1e-2,
    max_steps: int = 500,
    tol: float = 1e-4,
    window: int = 10,
) -> NoveltyHead:
    """Gradient descent of the head's binary cross-entropy (features frozen).
    Stops when the loss improves by less than ``tol`` (relative) over
    ``window`` steps."""
    if head.mu is None:
        allz = np.concatenate([z_ref, z_gen])
        head.mu = allz.mean(0)
        head.s = allz.std(0) + 1e-8
    hist = []
    for _ in range(max_steps):
        loss, gw, gb = _head_loss(head, z_ref, z_gen)
        hist.append(loss)
        if len(hist) > window and hist[-window - 1] - loss < tol * abs(hist[-window - 1]):
            break
        head.w = head.w - gamma * gw
        head.b = head.b - gamma * gb
    return head


def update_generator(
    state: GenerationState,
    head: NoveltyHead,
    model: GgnnModel,
    penalty_model: StructurePenaltyModel | None,
    config: GenerationConfig,
    rng: np.random.Generator,
) -> tuple[GenerationState, float]:
    """One reparameterized step on ``t`` and ``sigma``; returns the loss."""
    eps = rng.standard_normal((config.candidates,) + state.t.shape)
    t = Tensor(state.t, requires_grad=True)
    sg = Tensor(state.sigma, requires_grad=True)
    with model.frozen(), Tape() as tape:
        cand = ops.clip(ops.add(t, ops.mul(sg, eps)), *UNIT_BOX)
        px = ops.add(ops.mul(cand, UNIT_SCALE), UNIT_OFFSET)
        z = _features_of_points(model, px)
        logit = head.logit_tensor(z)
        if config.loss == "bce":
            loss = ops.bce_with_logits(logit, 0.0)  # -E log(1 - p)
        else:
            # hinge: push candidates below the head's decision boundary
            loss = ops.mean(ops.relu(ops.add(logit, 1.0)))
        if penalty_model is not None:
            loss = ops.add(loss, penalty_model.penalty(px, np.zeros((0, 2), dtype=np.int64)))
    tape.backward(loss)
    new_t = state.t - config.alpha * t.grad
    new_s = np.maximum(state.sigma - config.alpha * sg.grad, config.sigma_floor)
    return GenerationState(new_t, new_s), loss.item()


@dataclass
class GeneratedDigit:
    state: GenerationState
    accepted: bool
    head_accuracy: float
    iterations: int
    seed: int
    samples: np.ndarray  # (export_samples, n, 2) MNIST units
    features: np.ndarray  # (export_samples, feature_dim)
    history: list[float] = field(default_factory=list)


def _plateaued(losses: list[float], window: int, tol: float) -> bool:
    """Mean loss of the last ``window`` iterations improved on the window
    before it by less than ``tol`` (relative)."""
    if len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window : -window]))
    cur = float(np.mean(losses[-window:]))
    return prev - cur < tol * abs(prev)


def _run_round(model, penalty_model, z_ref, config, seed) -> GeneratedDigit:
    rng = np.random.default_rng(seed)
    state = GenerationState.initial(rng, config)
    head = NoveltyHead.zeros(model.config.feature_dim)
    streak, acc, it, hist, per_iter = 0, 0.0, 0, [], []
    for it in range(1, config.max_iterations + 1):
        ref = z_ref[rng.choice(len(z_ref), min(config.reference_batch, len(z_ref)), replace=False)]
        gen = features_of_candidates(model, sample_candidates(state, config.head_samples, rng))
        fit_discriminator(head, ref, gen, config.gamma, config.head_max_steps, config.plateau_tol, config.plateau_window)
        for _ in range(config.generator_steps):
            state, loss = update_generator(state, head, model, penalty_model, config, rng)
            hist.append(loss)
        per_iter.append(float(np.mean(hist[-config.generator_steps:])))
        # separability check on fresh candidates with the head refitted
        gen = features_of_candidates(model, sample_candidates(state, config.head_samples, rng))
        probe = fit_discriminator(NoveltyHead.zeros(len(head.w)), ref, gen, config.gamma,
                                  config.head_max_steps, config.plateau_tol, config.plateau_window)
        acc = probe.accuracy(ref, gen)
        streak = streak + 1 if acc >= config.accept_accuracy else 0
        if streak >= config.patience and _plateaued(per_iter, config.loss_window, config.loss_tol):
            break
    samples = sample_candidates(state, config.export_samples, rng)
    return GeneratedDigit(state, acc >= config.accept_accuracy, acc, it, seed, samples,
                          features_of_candidates(model, samples), hist)


def generate_sequence(
    model: GgnnModel,
    penalty_model: StructurePenaltyModel | None,
    reference_features: np.ndarray,
    count: int,
    seed: int = 0,
    config: GenerationConfig | None = None,
    log=None,
) -> list[GeneratedDigit]:
    """Generate ``count`` novel classes in turn. Each accepted class's
    samples join the reference set for later rounds. A round that fails
    the acceptance gate is retried once with a new seed."""
    config = config or GenerationConfig()
    z_ref = np.asarray(reference_features, dtype=np.float64)
    out = []
    for k in range(count):
        round_seed = seed * 1000 + 2 * k
        digit = _run_round(model, penalty_model, z_ref, config, round_seed)
        if not digit.accepted:
            if log:
                log(f"round {k}: head accuracy {digit.head_accuracy:.3f} < {config.accept_accuracy}; retrying")
            digit = _run_round(model, penalty_model, z_ref, config, round_seed + 1)
        if log:
            log(f"round {k}: accepted={digit.accepted} head_accuracy={digit.head_accuracy:.3f} "
                f"iterations={digit.iterations}")
        out.append(digit)
        if digit.accepted:
            z_ref = np.concatenate([z_ref, digit.features])
    return out


def export_features(model: GgnnModel, graphs: Sequence[StrokeGraph], tags: Sequence[str] | None = None):
    """Rows of ``(tag, z...)``; the tag defaults to the graph label."""
    z = model.features(list(graphs)) if len(graphs) else np.zeros((0, model.config.feature_dim))
    tags = [str(g.label) for g in graphs] if tags is None else [str(t) for t in tags]
    if len(tags) != len(z):
        raise ConfigError(f"{len(tags)} tags for {len(z)} graphs")
    return [(t, row) for t, row in zip(tags, z)]


def feature_table_text(rows, feature_dim: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tag"] + [f"z{i}" for i in range(feature_dim)])
    for tag, z in rows:
        w.writerow([tag] + [repr(float(v)) for v in z])
    return buf.getvalue()


def generation_rows(digits: Sequence[GeneratedDigit], names: Sequence[str] | None = None):
    names = names or [f"novel{chr(ord('A') + k)}" for k in range(len(digits))]
    rows = []
    for name, d in zip(names, digits):
        rows += [(name, z) for z in d.features]
    return rows


__all__ = [
    "GenerationConfig",
    "GenerationState",
    "NoveltyHead",
    "GeneratedDigit",
    "sample_candidates",
    "candidate_graphs",
    "features_of_candidates",
    "fit_discriminator",
    "update_generator",
    "generate_sequence",
    "export_features",
    "feature_table_text",
    "generation_rows",
    "to_pixels",
    "to_units",
]
