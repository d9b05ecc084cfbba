"""``strokegraph`` command line.

Every subcommand reads an optional JSON run config (``--config``), applies
flag overrides (flags win, ``--set a.b=value`` for anything without a
dedicated flag), echoes the resolved config to ``<out>/config.json`` and
writes artifacts under::

    <out>/logs  <out>/checkpoints  <out>/reports  <out>/traces  <out>/renders

Exit codes: 0 success, 1 valid run with a failed outcome (e.g. an attack
that missed its target), 2 usage, configuration or input-format errors.
Environment variables are not consulted.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from .errors import ConfigError, FormatError, StrokeGraphError, UsageError

SCHEMA: dict = {
    "seed": 0,
    "preset": "mnist",
    "out": "runs/default",
    "cache": None,
    "checkpoint": None,
    "jobs": 1,
    "data": {
        "dataset": "mnist",
        "images": None,
        "labels": None,
        "test_images": None,
        "test_labels": None,
        "quickdraw_dir": None,
        "categories": None,
        "per_class": None,  # [train, val, test] balanced subset sizes
        "validation": 5000,
    },
    "encoding": {
        "n": 10,
        "junction_tolerance": 2.0,
        "min_stroke_length": 5.0,
        "spur_ratio": 1.5,
        "spline_spacing": 16.0,
    },
    "model": {"fix_521": False, "message_mode": "elementwise"},
    "train": {
        "batch_size": None,
        "learning_rate": None,
        "epochs": None,
        "optimizer": None,
        "eval_every": 1,
    },
    "eval": {"split": "test"},
    "grid": {
        "rotation_max": 30.0,
        "tx_max": None,
        "ty_max": None,
        "rotation_samples": 31,
        "translation_samples": 5,
        "mode": "points",
        "split": "test",
        "limit": None,
    },
    "attack": {
        "mode": "points",
        "split": "test",
        "indices": None,
        "count": 10,
        "single_stroke": True,
        "source_label": None,
        "target": None,
        "max_steps": 2000,
        "step_size": 0.5,
        "threshold": 0.9,
    },
    "generation": {
        "count": 6,
        "alpha": 0.5,
        "gamma": 0.01,
        "max_iterations": 300,
        "generator_steps": 20,
        "export_samples": 100,
        "loss": "bce",
    },
    "export": {"split": "test"},
}

DIRS = ("logs", "checkpoints", "reports", "traces", "renders")


class ExitFailure(Exception):
    """Valid run, failed outcome (exit code 1)."""


# ------------------------------------------------------------------ config


def _check_keys(doc: dict, schema: dict, path: str = "") -> None:
    for k, v in doc.items():
        key = f"{path}{k}"
        if k not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(schema[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            _check_keys(v, schema[k], key + ".")


def _merge(base: dict, doc: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in doc.items():
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {dotted!r} does not name a nested value")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    doc: dict = {}
    if args.config:
        try:
            with open(args.config) as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    overrides: dict = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(overrides, k.strip(), _parse_value(v))
    for flag in ("seed", "preset", "out", "cache", "checkpoint", "jobs"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[flag] = v
    _check_keys(doc, SCHEMA)
    _check_keys(overrides, SCHEMA)
    return _merge(_merge(SCHEMA, doc), overrides)


def _prepare_out(cfg: dict, command: str) -> str:
    out = cfg["out"]
    for d in DIRS:
        os.makedirs(os.path.join(out, d), exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump({"command": command, **cfg}, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def _encoding(cfg):
    from .graphenc import EncodingConfig

    return EncodingConfig(**cfg["encoding"])


def _need(cfg, key):
    if not cfg.get(key):
        raise UsageError(f"'{key}' is required (flag --{key} or config key)")
    return cfg[key]


def _load_model(cfg):
    from .trainer import load_checkpoint

    return load_checkpoint(_need(cfg, "checkpoint"), expect_n=cfg["encoding"]["n"])


def _split_entries(cfg, split):
    from .cache import load_cache

    entries = load_cache(_need(cfg, "cache"), [split])
    if not entries:
        raise UsageError(f"cache has no samples in split {split!r}")
    return [e for e in entries if e.ok]


# ---------------------------------------------------------------- commands


def cmd_preprocess(cfg, out) -> int:
    from .cache import build_cache
    from .sketchio import (
        QUICKDRAW_SHAPES,
        balanced_subsets,
        load_mnist_idx,
        load_quickdraw_ndjson,
        split_quickdraw,
    )

    d = cfg["data"]
    rng_seed = cfg["seed"]
    if d["dataset"] == "mnist":
        if not d["images"] or not d["labels"]:
            raise UsageError("data.images and data.labels are required for MNIST")
        train = load_mnist_idx(d["images"], d["labels"])
        if d["per_class"]:
            parts = balanced_subsets(train, d["per_class"], seed=rng_seed)
            splits = dict(zip(("train", "val", "test"), parts))
        else:
            order = np.random.default_rng(rng_seed).permutation(len(train))
            nv = int(d["validation"])
            splits = {
                "train": [train[i] for i in sorted(order[nv:])],
                "val": [train[i] for i in sorted(order[:nv])],
            }
            if d["test_images"] and d["test_labels"]:
                splits["test"] = load_mnist_idx(d["test_images"], d["test_labels"])
    elif d["dataset"] == "quickdraw":
        qd = d["quickdraw_dir"]
        if not qd:
            raise UsageError("data.quickdraw_dir is required for QuickDraw")
        cats = d["categories"] or list(QUICKDRAW_SHAPES)
        per = d["per_class"] or [1000, 100, 100]
        records = []
        for c in cats:
            records += load_quickdraw_ndjson(os.path.join(qd, f"{c}.ndjson"), limit=None)
        split = split_quickdraw(records, cats, tuple(per), seed=rng_seed)
        splits = {}
        for name, part in (("train", split.train), ("val", split.validation), ("test", split.test)):
            splits[name] = part
    else:
        raise ConfigError(f"unknown dataset {d['dataset']!r}")
    log_path = os.path.join(out, "logs", "preprocess.log")
    with open(log_path, "w") as logf:
        entries = build_cache(_need(cfg, "cache"), splits, _encoding(cfg), jobs=int(cfg["jobs"]),
                              log=lambda m: logf.write(m + "\n"))
    ok = sum(e.ok for e in entries)
    print(f"cached {ok} of {len(entries)} samples ({len(entries) - ok} failures logged to {log_path})")
    return 0


def _train_config(cfg, out):
    from .trainer import TrainConfig

    kw = {k: v for k, v in cfg["train"].items() if v is not None}
    return TrainConfig.for_preset(
        cfg["preset"], seed=cfg["seed"], checkpoint_path=os.path.join(out, "checkpoints", "best.ckpt"),
        log_path=os.path.join(out, "logs", "train.jsonl"), verbose=True, **kw,
    )


def _model_config(cfg):
    from .mpnn import preset

    m = cfg["model"]
    return preset(cfg["preset"], fix_521=m["fix_521"], message_mode=m["message_mode"], n=cfg["encoding"]["n"],
                  hidden_dim=max(100, cfg["encoding"]["n"] ** 2))


def cmd_train(cfg, out) -> int:
    from .trainer import evaluate, train

    graphs = lambda s: [e.graph for e in _split_entries(cfg, s)]  # noqa: E731
    tr = graphs("train")
    try:
        va = graphs("val")
    except UsageError:
        va = []
    tc = _train_config(cfg, out)
    model, metrics = train(tr, tc, va, model_config=_model_config(cfg))
    model.save(tc.checkpoint_path, {"best_epoch": metrics.best_epoch})
    lines = [f"best_epoch\t{metrics.best_epoch}", f"best_val_acc\t{metrics.best_val_acc:.6f}"]
    try:
        lines.append(f"test_acc\t{evaluate(model, graphs('test')).accuracy:.6f}")
    except UsageError:
        pass
    with open(os.path.join(out, "reports", "train.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_eval(cfg, out) -> int:
    from .trainer import evaluate

    model = _load_model(cfg)
    entries = _split_entries(cfg, cfg["eval"]["split"])
    report = evaluate(model, [e.graph for e in entries])
    text = report.to_text()
    with open(os.path.join(out, "reports", f"eval_{cfg['eval']['split']}.txt"), "w") as f:
        f.write(text)
    sys.stdout.write(text)
    return 0


def cmd_params(cfg, out) -> int:
    from .mpnn import GgnnModel, param_report

    text = param_report(GgnnModel(_model_config(cfg))) + "\n"
    with open(os.path.join(out, "reports", "params.txt"), "w") as f:
        f.write(text)
    sys.stdout.write(text)
    return 0


def cmd_robustness(cfg, out) -> int:
    from .robustness import TransformGrid, spatial_robustness

    g = cfg["grid"]
    default_t = 10.0 if cfg["preset"] == "quickdraw" else 3.0
    grid = TransformGrid(
        float(g["rotation_max"]),
        float(g["tx_max"] if g["tx_max"] is not None else default_t),
        float(g["ty_max"] if g["ty_max"] is not None else default_t),
        int(g["rotation_samples"]),
        int(g["translation_samples"]),
    )
    print(f"{grid.size} transforms/sample")
    model = _load_model(cfg)
    entries = _split_entries(cfg, g["split"])
    if g["limit"]:
        entries = entries[: int(g["limit"])]
    labels = [e.label for e in entries]
    if g["mode"] == "points":
        samples = [e.strokes for e in entries]
    elif g["mode"] == "raster":
        samples = _rasters_for(cfg, entries)
    else:
        raise ConfigError(f"grid.mode must be 'points' or 'raster', got {g['mode']!r}")
    report = spatial_robustness(model, samples, labels, grid, g["mode"], _encoding(cfg), jobs=int(cfg["jobs"]))
    text = report.to_text()
    with open(os.path.join(out, "reports", f"robustness_{g['mode']}.txt"), "w") as f:
        f.write(text)
    print(f"accuracy {report.accuracy:.4f}  robustness {report.robustness:.4f}  samples {len(entries)}")
    return 0


def _rasters_for(cfg, entries):
    """Re-load and normalize the source rasters of cached MNIST samples."""
    from .sketchio import load_mnist_idx, normalize_pad_dilate

    d = cfg["data"]
    pools = {}
    for img, lab in ((d["images"], d["labels"]), (d["test_images"], d["test_labels"])):
        if img and lab:
            for s in load_mnist_idx(img, lab):
                pools[s.source_id] = s
    if not pools:
        raise UsageError("raster mode needs data.images/data.labels to re-load source images")
    out = []
    for e in entries:
        if e.source_id not in pools:
            raise UsageError(f"source {e.source_id!r} not found in the configured image files")
        out.append(normalize_pad_dilate(pools[e.source_id].image))
    return out


def _penalty_for(train_entries, target, strokes_count):
    from .robustness import penalty_for_target

    return penalty_for_target([(e.label, e.strokes) for e in train_entries], target, strokes_count)


def cmd_attack(cfg, out) -> int:
    from .robustness import AttackConfig, attack_points, attack_topology, write_snapshots

    a = cfg["attack"]
    model = _load_model(cfg)
    train_entries = _split_entries(cfg, "train")
    pool = _split_entries(cfg, a["split"])
    if a["single_stroke"]:
        pool = [e for e in pool if len(e.strokes) == 1]
    if a["source_label"] is not None:
        pool = [e for e in pool if e.label == int(a["source_label"])]
    if a["indices"] is not None:
        by_index = {e.index: e for e in pool}
        missing = [i for i in a["indices"] if i not in by_index]
        if missing:
            raise UsageError(f"attack.indices not available in the filtered pool: {missing}")
        chosen = [by_index[i] for i in a["indices"]]
    else:
        rng = np.random.default_rng(cfg["seed"])
        k = min(int(a["count"]), len(pool))
        chosen = [pool[i] for i in sorted(rng.choice(len(pool), k, replace=False))] if k else []
    if not chosen:
        raise UsageError("no samples match the attack selection")
    lines = []
    n_ok = 0
    for e in chosen:
        probs = model.predict_proba([e.graph])[0]
        target = int(a["target"]) if a["target"] is not None else int(np.argsort(-probs, kind="stable")[1])
        ac = AttackConfig(target, int(a["max_steps"]), float(a["step_size"]), float(a["threshold"]))
        if a["mode"] == "points":
            pen = _penalty_for(train_entries, target, len(e.strokes))
            trace = attack_points(model, e.strokes, target, pen, ac)
        elif a["mode"] == "topology":
            pen = _penalty_for(train_entries, target, len(e.strokes) + 1)
            trace = attack_topology(model, e.strokes, target, pen, ac)
        else:
            raise ConfigError(f"attack.mode must be 'points' or 'topology', got {a['mode']!r}")
        stem = f"{a['mode']}_{e.index:06d}_to{target}"
        trace.write(os.path.join(out, "traces", stem + ".jsonl"))
        write_snapshots(trace, os.path.join(out, "renders", stem))
        n_ok += trace.success
        s = trace.summary()
        lines.append(json.dumps({"index": e.index, "label": e.label, **s}, sort_keys=True))
        print(lines[-1])
    with open(os.path.join(out, "reports", f"attack_{a['mode']}.jsonl"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"succeeded {n_ok} of {len(chosen)}")
    if n_ok < len(chosen):
        raise ExitFailure(f"{len(chosen) - n_ok} attack(s) did not reach the target")
    return 0


def cmd_generate(cfg, out) -> int:
    from .generator import GenerationConfig, feature_table_text, generate_sequence, generation_rows, to_pixels
    from .robustness import fit_penalty, render_points, save_png
    from .strokeparse import Stroke, StrokeSet, save_strokes

    g = cfg["generation"]
    model = _load_model(cfg)
    train_entries = _split_entries(cfg, "train")
    penalty = fit_penalty([e.strokes for e in train_entries])
    z_ref = model.features([e.graph for e in train_entries])
    gc = GenerationConfig(n=cfg["encoding"]["n"], alpha=float(g["alpha"]), gamma=float(g["gamma"]),
                          max_iterations=int(g["max_iterations"]), generator_steps=int(g["generator_steps"]),
                          export_samples=int(g["export_samples"]), loss=g["loss"])
    logf = open(os.path.join(out, "logs", "generate.log"), "w")
    try:
        digits = generate_sequence(model, penalty, z_ref, int(g["count"]), cfg["seed"], gc,
                                   log=lambda m: (logf.write(m + "\n"), print(m)))
    finally:
        logf.close()
    names = [f"novel{chr(ord('A') + k)}" for k in range(len(digits))]
    summary = []
    for name, d in zip(names, digits):
        pts = to_pixels(d.state.t)
        save_strokes(os.path.join(out, "renders", f"{name}.sgs"), StrokeSet([Stroke(pts)], [], [0]))
        save_png(render_points(pts[None]), os.path.join(out, "renders", f"{name}.png"))
        summary.append(json.dumps({"name": name, "accepted": d.accepted, "head_accuracy": round(d.head_accuracy, 6),
                                   "iterations": d.iterations, "seed": d.seed}, sort_keys=True))
    real = [(str(e.label), z) for e, z in zip(train_entries, z_ref)]
    with open(os.path.join(out, "reports", "features.csv"), "w") as f:
        f.write(feature_table_text(real + generation_rows(digits, names), model.config.feature_dim))
    with open(os.path.join(out, "reports", "generate.jsonl"), "w") as f:
        f.write("\n".join(summary) + ("\n" if summary else ""))
    failed = [n for n, d in zip(names, digits) if not d.accepted]
    if failed:
        raise ExitFailure(f"rounds failed the separability gate: {failed}")
    return 0


def cmd_export_features(cfg, out) -> int:
    from .generator import export_features, feature_table_text

    model = _load_model(cfg)
    entries = _split_entries(cfg, cfg["export"]["split"])
    rows = export_features(model, [e.graph for e in entries])
    path = os.path.join(out, "reports", f"features_{cfg['export']['split']}.csv")
    with open(path, "w") as f:
        f.write(feature_table_text(rows, model.config.feature_dim))
    print(f"wrote {len(rows)} rows to {path}")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "params": cmd_params,
    "attack": cmd_attack,
    "robustness": cmd_robustness,
    "generate": cmd_generate,
    "export-features": cmd_export_features,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strokegraph", description="Stroke-graph sketch classification toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=("mnist", "quickdraw"))
        sp.add_argument("--cache", help="preprocessed cache directory")
        sp.add_argument("--checkpoint", help="model checkpoint file")
        sp.add_argument("--jobs", type=int, help="worker processes for per-sample work (default 1)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        cfg = resolve_config(args)
        if int(cfg["jobs"]) < 1:
            raise ConfigError("jobs must be >= 1")
        out = _prepare_out(cfg, args.command)
        return COMMANDS[args.command](cfg, out)
    except ExitFailure as exc:
        print(f"strokegraph: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, UsageError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"strokegraph: error: {exc}", file=sys.stderr)
        return 2
    except TypeError as exc:
        # bad value types in config sections land here
        print(f"strokegraph: error: invalid configuration ({exc})", file=sys.stderr)
        return 2
    except StrokeGraphError as exc:
        print(f"strokegraph: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
