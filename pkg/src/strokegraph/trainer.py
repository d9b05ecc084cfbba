"""Supervised training, evaluation and checkpoint round-trips."""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .graphenc import StrokeGraph
from .mpnn import GgnnModel, ModelConfig, batch_graphs, preset
from .ndgrad import Adam, Tape, ops, sgd_step


@dataclass
class TrainConfig:
    preset: str = "mnist"
    batch_size: int = 128
    learning_rate: float = 1e-4
    epochs: int = 50
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    checkpoint_path: str | None = None
    log_path: str | None = None
    eval_every: int = 1
    verbose: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def for_preset(cls, name: str, **kw) -> "TrainConfig":
        if name == "mnist":
            base = dict(batch_size=128, learning_rate=1e-4, epochs=50, optimizer="adam")
        elif name == "quickdraw":
            base = dict(batch_size=8, learning_rate=2e-4, epochs=100, optimizer="sgd")
        else:
            raise ConfigError(f"unknown preset {name!r}")
        base.update(kw)
        return cls(preset=name, **base)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None
    test_acc: float | None
    seconds: float


@dataclass
class Metrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    initial_loss: float = float("nan")

    def to_lines(self) -> list[str]:
        return [json.dumps(asdict(r), sort_keys=True) for r in self.epochs]


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # (K, K), rows = true class
    predictions: np.ndarray

    def to_text(self) -> str:
        k = self.confusion.shape[0]
        lines = [f"accuracy\t{self.accuracy:.6f}", f"samples\t{int(self.confusion.sum())}", "confusion (rows=true, cols=pred)"]
        lines.append("\t" + "\t".join(str(j) for j in range(k)))
        for i in range(k):
            lines.append(f"{i}\t" + "\t".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(lines) + "\n"


def mean_loss(model: GgnnModel, graphs: Sequence[StrokeGraph], chunk: int = 256) -> float:
    total = 0.0
    for k in range(0, len(graphs), chunk):
        b = batch_graphs(graphs[k : k + chunk])
        logits, _ = model.forward_batch(b)
        total += ops.softmax_cross_entropy(logits, b.labels).item()
    return total / max(1, len(graphs))


def evaluate(model: GgnnModel, graphs: Sequence[StrokeGraph], labels: Sequence[int] | None = None) -> EvalReport:
    """Argmax prediction; ties go to the lowest class index."""
    k = model.config.class_count
    y = np.array([g.label for g in graphs] if labels is None else labels, dtype=np.int64)
    if len(y) and (y.min() < 0 or y.max() >= k):
        raise ConfigError(f"labels outside 0..{k - 1}")
    pred = model.predict(graphs) if len(graphs) else np.zeros(0, dtype=np.int64)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    acc = float((pred == y).mean()) if len(y) else 0.0
    return EvalReport(acc, conf, pred)


def save_checkpoint(model: GgnnModel, path: str, extra: dict | None = None) -> None:
    model.save(path, extra)


def load_checkpoint(path: str, expect_n: int | None = None) -> GgnnModel:
    return GgnnModel.load(path, expect_n)


def train(
    train_graphs: Sequence[StrokeGraph],
    config: TrainConfig,
    val_graphs: Sequence[StrokeGraph] = (),
    test_graphs: Sequence[StrokeGraph] = (),
    model_config: ModelConfig | None = None,
    model: GgnnModel | None = None,
) -> tuple[GgnnModel, Metrics]:
    """Mini-batch training of the summed cross-entropy.

    Each batch is one disjoint-union graph, so the batch loss is exactly the
    sum of per-graph losses. The model with the best validation accuracy
    (earliest on ties) is kept and returned; without a validation set the
    last epoch wins.
    """
    if not train_graphs:
        raise ConfigError("training set is empty")
    n = train_graphs[0].n
    for g in list(train_graphs) + list(val_graphs) + list(test_graphs):
        if g.n != n:
            raise ConfigError(f"graphs mix n={n} and n={g.n}")
    if model is None:
        mc = model_config or preset(config.preset)
        if mc.n != n:
            raise ConfigError(f"model n={mc.n} but graphs have n={n}")
        model = GgnnModel(mc, seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(lr=config.learning_rate) if config.optimizer == "adam" else None
    params = [model.store[k] for k in model.store if model.store.trainable(k)]
    for p in params:
        p.requires_grad = True

    metrics = Metrics(initial_loss=mean_loss(model, train_graphs))
    best_state = model.store.state()
    log_f = open(config.log_path, "w") if config.log_path else None
    last_good: str | None = None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_graphs))
            total, correct = 0.0, 0
            for s in range(0, len(order), config.batch_size):
                b = batch_graphs([train_graphs[i] for i in order[s : s + config.batch_size]])
                try:
                    with Tape() as tape:
                        logits, _ = model.forward_batch(b)
                        loss = ops.softmax_cross_entropy(logits, b.labels)
                    tape.backward(loss)
                except NumericError as exc:
                    raise NumericError(
                        f"training diverged at epoch {epoch}: {exc}; last good checkpoint: {last_good}"
                    ) from exc
                total += loss.item()
                correct += int((np.argmax(logits.data, axis=1) == b.labels).sum())
                if opt is not None:
                    opt.step(model.store)
                else:
                    sgd_step(model.store, config.learning_rate)
            if not math.isfinite(total):
                raise NumericError(f"training diverged at epoch {epoch}; last good checkpoint: {last_good}")
            val_acc = test_acc = None
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                if val_graphs:
                    val_acc = evaluate(model, val_graphs).accuracy
                if test_graphs:
                    test_acc = evaluate(model, test_graphs).accuracy
            rec = EpochRecord(epoch, total / len(order), correct / len(order), val_acc, test_acc,
                              round(time.perf_counter() - t0, 3))
            metrics.epochs.append(rec)
            line = json.dumps(asdict(rec), sort_keys=True)
            if log_f:
                log_f.write(line + "\n")
                log_f.flush()
            if config.verbose:
                print(line, file=sys.stdout, flush=True)
            improved = val_acc is not None and val_acc > metrics.best_val_acc
            if improved or not val_graphs:
                metrics.best_val_acc = val_acc if val_acc is not None else metrics.best_val_acc
                metrics.best_epoch = epoch
                best_state = model.store.state()
                if config.checkpoint_path:
                    save_checkpoint(model, config.checkpoint_path, {"epoch": epoch})
                    last_good = config.checkpoint_path
    finally:
        if log_f:
            log_f.close()
    model.store.load_state(best_state)
    model.store.zero_grad()
    return model, metrics


__all__ = [
    "TrainConfig",
    "Metrics",
    "EpochRecord",
    "EvalReport",
    "train",
    "evaluate",
    "mean_loss",
    "save_checkpoint",
    "load_checkpoint",
]
