"""Gated graph network over stroke graphs and its linear classifier head.

One message/update step, for every vertex ``i``::

    m_i = sum_{j ~ i} phi1(flatten(E_ij)) * v_j      (elementwise gate)
    v_i <- GRU(v_i, m_i)

where ``E_ij`` has rows indexed by the receiving stroke ``i``. After
``message_steps`` updates the graph feature is::

    z = sum_i sigmoid(phi2([v_i^T, v_i^0])) * phi3(v_i^T)

and the classifier is an affine map ``z -> logits``. ``phi1..3`` are MLPs
with ReLU between layers and the widths of the chosen preset. ``phi1`` is
shared across steps.

Vertex states start as the flattened distance matrix (times
``input_scale``) zero-padded to ``hidden_dim``.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .graphenc import StrokeGraph
from .ndgrad import ParameterStore, Tensor, add_gru, add_mlp, gru_cell, mlp, ops
from .ndgrad import checkpoint as ckpt

PUBLISHED_PARAM_COUNTS = {"mnist": 546_634, "quickdraw": 8_707_868}


@dataclass(frozen=True)
class ModelConfig:
    n: int = 10
    hidden_dim: int = 100
    phi1_dims: tuple[int, ...] = (128, 256, 128)
    phi2_dims: tuple[int, ...] = (128, 256, 128)
    phi3_dims: tuple[int, ...] = (128, 256, 128)
    message_steps: int = 1
    feature_dim: int = 10
    class_count: int = 10
    input_scale: float = 1.0 / 224.0
    message_mode: str = "elementwise"  # or "matrix"
    preset: str = "custom"

    def __post_init__(self):
        if self.hidden_dim < self.n * self.n:
            raise ConfigError(f"hidden_dim {self.hidden_dim} < n^2 = {self.n * self.n}")
        if self.message_steps < 1:
            raise ConfigError("message_steps must be >= 1")
        if self.message_mode not in ("elementwise", "matrix"):
            raise ConfigError(f"unknown message_mode {self.message_mode!r}")
        for k in ("phi1_dims", "phi2_dims", "phi3_dims"):
            object.__setattr__(self, k, tuple(int(w) for w in getattr(self, k)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("phi1_dims", "phi2_dims", "phi3_dims"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


def preset(name: str, **overrides) -> ModelConfig:
    """Named architectures. ``quickdraw`` keeps the printed 521 width;
    pass ``fix_521=True`` to use 512."""
    fix = overrides.pop("fix_521", False)
    if name == "mnist":
        w = (128, 256, 128)
        cfg = ModelConfig(n=10, hidden_dim=100, phi1_dims=w, phi2_dims=w, phi3_dims=w, message_steps=1,
                          feature_dim=10, class_count=10, preset="mnist")
    elif name == "quickdraw":
        widths = (128, 256, 512, 2048, 512 if fix else 521, 256, 128)
        cfg = ModelConfig(n=10, hidden_dim=100, phi1_dims=widths, phi2_dims=widths, phi3_dims=widths, message_steps=3,
                          feature_dim=1024, class_count=7, preset="quickdraw")
    else:
        raise ConfigError(f"unknown preset {name!r} (expected 'mnist' or 'quickdraw')")
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class GraphBatch:
    """Disjoint union of graphs; numpy inputs for a forward pass."""

    vertex_inputs: np.ndarray  # (V, n*n)
    message_inputs: np.ndarray  # (M, n*n) rows = receiver's points
    receivers: np.ndarray  # (M,)
    senders: np.ndarray  # (M,)
    graph_ids: np.ndarray  # (V,)
    num_graphs: int
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def batch_graphs(graphs: Sequence[StrokeGraph]) -> GraphBatch:
    n = graphs[0].n
    vin, min_, recv, send, gid = [], [], [], [], []
    offset = 0
    for g_i, g in enumerate(graphs):
        if g.n != n:
            raise ConfigError(f"graph {g_i} has n={g.n}, batch uses n={n}")
        v = g.num_vertices
        vin.append(g.vertex_features.reshape(v, n * n))
        gid.append(np.full(v, g_i, dtype=np.int64))
        for (i, j), e in zip(g.edge_index, g.edge_features):
            recv += [offset + i, offset + j]
            send += [offset + j, offset + i]
            min_ += [e.reshape(-1), e.T.reshape(-1)]
        offset += v
    return GraphBatch(
        np.concatenate(vin),
        np.array(min_, dtype=np.float64).reshape(-1, n * n),
        np.array(recv, dtype=np.int64),
        np.array(send, dtype=np.int64),
        np.concatenate(gid),
        len(graphs),
        np.array([g.label for g in graphs], dtype=np.int64),
    )


class GgnnModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        c = config
        hd = c.hidden_dim
        phi1_out = hd if c.message_mode == "elementwise" else hd * hd
        add_mlp(self.store, "phi1", (c.n * c.n, *c.phi1_dims, phi1_out), rng)
        add_gru(self.store, "gru", hd, hd, rng)
        add_mlp(self.store, "phi2", (2 * hd, *c.phi2_dims, c.feature_dim), rng)
        add_mlp(self.store, "phi3", (hd, *c.phi3_dims, c.feature_dim), rng)
        add_mlp(self.store, "cls", (c.feature_dim, c.class_count), rng)
        self._depth = {k: len(getattr(c, k + "_dims")) + 1 for k in ("phi1", "phi2", "phi3")}

    # ------------------------------------------------------------ pieces

    def init_state(self, vertex_inputs) -> Tensor:
        if vertex_inputs.shape[1] != self.config.n ** 2:
            raise ConfigError(
                f"vertex inputs have {vertex_inputs.shape[1]} entries, model expects n^2 = {self.config.n ** 2}"
            )
        x = ops.mul(vertex_inputs, self.config.input_scale)
        return ops.pad_columns(x, self.config.hidden_dim)

    def message_pass(self, h: Tensor, message_inputs, receivers, senders) -> Tensor:
        c = self.config
        nv = h.shape[0]
        if len(receivers):
            gate = mlp(self.store, "phi1", ops.mul(message_inputs, c.input_scale), self._depth["phi1"])
            hs = ops.take_rows(h, senders)
            if c.message_mode == "elementwise":
                msg = ops.mul(gate, hs)
            else:
                mats = ops.reshape(gate, (len(receivers), c.hidden_dim, c.hidden_dim))
                msg = ops.batched_matvec(mats, hs)
            m = ops.segment_sum(msg, receivers, nv)
        else:
            m = Tensor(np.zeros((nv, c.hidden_dim)))
        return gru_cell(h, m, self.store, "gru")

    def readout(self, h_final: Tensor, h_init: Tensor, graph_ids, num_graphs: int) -> Tensor:
        gate = ops.sigmoid(mlp(self.store, "phi2", ops.concat([h_final, h_init], axis=1), self._depth["phi2"]))
        val = mlp(self.store, "phi3", h_final, self._depth["phi3"])
        return ops.segment_sum(ops.mul(gate, val), graph_ids, num_graphs)

    def classify(self, z) -> Tensor:
        return mlp(self.store, "cls", z, 1)

    # ---------------------------------------------------------- forward

    def forward(self, vertex_inputs, message_inputs, receivers, senders, graph_ids, num_graphs):
        """Returns ``(logits, z)`` tensors; inputs may be tracked tensors."""
        h0 = self.init_state(vertex_inputs)
        h = h0
        for _ in range(self.config.message_steps):
            h = self.message_pass(h, message_inputs, receivers, senders)
        z = self.readout(h, h0, graph_ids, num_graphs)
        return self.classify(z), z

    def forward_batch(self, batch: GraphBatch):
        return self.forward(
            batch.vertex_inputs, batch.message_inputs, batch.receivers, batch.senders,
            batch.graph_ids, batch.num_graphs,
        )

    def forward_points(self, points, junction_pairs, graph_ids=None, num_graphs: int = 1):
        """Forward from control points ``(S, n, 2)`` (tensor or array).

        ``junction_pairs`` lists undirected stroke pairs ``(i, j)`` over the
        stacked strokes; distances are computed on the tape so gradients reach
        the points.
        """
        c = self.config
        s = points.shape[0]
        idx = np.arange(s)
        verts = ops.reshape(ops.pair_distances(points, idx, idx), (s, c.n * c.n))
        pairs = np.asarray(junction_pairs, dtype=np.int64).reshape(-1, 2)
        recv = np.concatenate([pairs[:, 0], pairs[:, 1]])
        send = np.concatenate([pairs[:, 1], pairs[:, 0]])
        if len(recv):
            msgs = ops.reshape(ops.pair_distances(points, recv, send), (len(recv), c.n * c.n))
        else:
            msgs = np.zeros((0, c.n * c.n))
        gids = np.zeros(s, dtype=np.int64) if graph_ids is None else np.asarray(graph_ids)
        return self.forward(verts, msgs, recv, send, gids, num_graphs)

    # --------------------------------------------------------- inference

    def logits(self, graphs: Sequence[StrokeGraph], chunk: int = 256) -> np.ndarray:
        out = []
        for k in range(0, len(graphs), chunk):
            logits, _ = self.forward_batch(batch_graphs(graphs[k : k + chunk]))
            out.append(logits.data)
        return np.concatenate(out) if out else np.zeros((0, self.config.class_count))

    def features(self, graphs: Sequence[StrokeGraph], chunk: int = 256) -> np.ndarray:
        out = []
        for k in range(0, len(graphs), chunk):
            _, z = self.forward_batch(batch_graphs(graphs[k : k + chunk]))
            out.append(z.data)
        return np.concatenate(out) if out else np.zeros((0, self.config.feature_dim))

    def predict_proba(self, graphs: Sequence[StrokeGraph]) -> np.ndarray:
        return ops.softmax(self.logits(graphs))

    def predict(self, graphs: Sequence[StrokeGraph]) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(graphs), axis=1)

    @contextmanager
    def frozen(self):
        """Parameters stop tracking gradients inside the block."""
        flags = {k: t.requires_grad for k, t in self.store.items()}
        for t in (t for _, t in self.store.items()):
            t.requires_grad = False
        try:
            yield self
        finally:
            for k, t in self.store.items():
                t.requires_grad = flags[k]

    def param_count(self) -> int:
        return param_count(self)

    # -------------------------------------------------------- checkpoints

    def save(self, path: str, extra: dict | None = None) -> None:
        cfg = {"model": self.config.to_dict()}
        if extra:
            cfg["extra"] = extra
        ckpt.save(path, self.store.state(), cfg)

    @classmethod
    def load(cls, path: str, expect_n: int | None = None) -> "GgnnModel":
        arrays, cfg = ckpt.load(path)
        if "model" not in cfg:
            raise ConfigError(f"{path}: checkpoint has no model config block")
        config = ModelConfig.from_dict(cfg["model"])
        if expect_n is not None and config.n != expect_n:
            raise ConfigError(f"{path}: checkpoint was trained with n={config.n}, expected n={expect_n}")
        model = cls(config)
        if set(arrays) != set(model.store):
            raise ConfigError(f"{path}: parameter names do not match the model config")
        model.store.load_state(arrays)
        model.extra = cfg.get("extra", {})
        return model


def param_count(model: GgnnModel) -> int:
    return model.store.count()


def param_breakdown(model: GgnnModel) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, t in model.store.items():
        out[name.split(".")[0]] = out.get(name.split(".")[0], 0) + t.size
    return out


def param_report(model: GgnnModel) -> str:
    """Human-readable parameter accounting against the published totals."""
    c = model.config
    parts = param_breakdown(model)
    total = param_count(model)
    lines = [f"preset: {c.preset}", f"total trainable parameters: {total:,}"]
    for k, v in parts.items():
        lines.append(f"  {k:5s} {v:>10,}")
    ref = PUBLISHED_PARAM_COUNTS.get(c.preset)
    if ref:
        lines.append(f"published total: {ref:,} (ratio {ref / total:.3f})")
    lines.append(
        f"phi1 reading: {c.message_mode} "
        + ("(edge network emits a hidden_dim gate multiplied into the neighbour state)"
           if c.message_mode == "elementwise"
           else "(edge network emits a hidden_dim x hidden_dim matrix applied to the neighbour state)")
    )
    lines.append(
        f"layout: phi1 {c.n * c.n}->{'->'.join(map(str, c.phi1_dims))}->"
        f"{c.hidden_dim if c.message_mode == 'elementwise' else c.hidden_dim ** 2}; "
        f"phi2 {2 * c.hidden_dim}->...->{c.feature_dim}; phi3 {c.hidden_dim}->...->{c.feature_dim}; "
        f"GRU {c.hidden_dim}/{c.hidden_dim}; classifier {c.feature_dim}->{c.class_count}"
    )
    return "\n".join(lines)
