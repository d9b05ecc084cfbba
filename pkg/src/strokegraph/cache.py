"""Raster -> strokes -> graph pipeline and its on-disk cache.

Cache layout::

    <dir>/manifest.tsv       one line per sample, in input order
    <dir>/encoding.json      EncodingConfig used to build the cache
    <dir>/strokes/NNNNNN.sgs stroke files (strokeparse format)
    <dir>/graphs/NNNNNN.sgg  graph files (graphenc format)

Manifest columns: index, split, source_id, label, status, strokes, graph.
``status`` is ``ok`` or ``failed:<reason>``; failed rows have ``-`` paths.
Nothing time-dependent is written, so rebuilding with the same inputs and
config gives byte-identical files.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .errors import ConfigError, FormatError, StrokeGraphError
from .graphenc import EncodingConfig, StrokeGraph, encode, load_graph, save_graph
from .sketchio import LabeledSample, RasterImage, normalize_pad_dilate
from .strokeparse import StrokeSet, extract, load_strokes, save_strokes

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "index\tsplit\tsource_id\tlabel\tstatus\tstrokes\tgraph"


def sketch_to_graph(
    image: RasterImage,
    config: EncodingConfig | None = None,
    label: int = -1,
    normalize: bool = True,
    backend: str | None = None,
) -> tuple[StrokeSet, StrokeGraph]:
    """Normalize (crop/scale/pad/dilate), extract strokes, encode."""
    config = config or EncodingConfig()
    img = normalize_pad_dilate(image) if normalize else image
    strokes = extract(img, config, backend)
    return strokes, encode(strokes, config, label)


@dataclass
class CacheEntry:
    index: int
    split: str
    source_id: str
    label: int
    status: str
    strokes: StrokeSet | None = None
    graph: StrokeGraph | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _work(args):
    image, label, config = args
    try:
        strokes, graph = sketch_to_graph(image, config, label)
    except StrokeGraphError as exc:
        return None, None, f"failed:{type(exc).__name__}"
    if len(strokes) == 0:
        return None, None, "failed:NoStrokes"
    return strokes, graph, "ok"


def process_samples(
    samples: Sequence[LabeledSample], config: EncodingConfig | None = None, jobs: int = 1
) -> list[tuple[StrokeSet | None, StrokeGraph | None, str]]:
    """Run the pipeline over samples; failures are returned, not raised.
    Output order always follows input order."""
    config = config or EncodingConfig()
    tasks = [(s.image, s.label, config) for s in samples]
    if jobs <= 1:
        return [_work(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_work, tasks, chunksize=16))


def build_cache(
    out_dir: str,
    splits: dict[str, Sequence[LabeledSample]],
    config: EncodingConfig | None = None,
    jobs: int = 1,
    log=None,
) -> list[CacheEntry]:
    config = config or EncodingConfig()
    os.makedirs(os.path.join(out_dir, "strokes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "graphs"), exist_ok=True)
    with open(os.path.join(out_dir, "encoding.json"), "w") as f:
        json.dump(asdict(config), f, indent=2, sort_keys=True)
        f.write("\n")
    entries: list[CacheEntry] = []
    lines = [MANIFEST_HEADER]
    idx = 0
    for split, samples in splits.items():
        for s, (strokes, graph, status) in zip(samples, process_samples(samples, config, jobs)):
            sp = gp = "-"
            if status == "ok":
                sp = f"strokes/{idx:06d}.sgs"
                gp = f"graphs/{idx:06d}.sgg"
                save_strokes(os.path.join(out_dir, sp), strokes)
                save_graph(os.path.join(out_dir, gp), graph)
            elif log is not None:
                log(f"sample {s.source_id} ({split}): {status}")
            if "\t" in s.source_id or "\n" in s.source_id:
                raise FormatError(f"source id {s.source_id!r} contains a tab or newline")
            lines.append(f"{idx}\t{split}\t{s.source_id}\t{s.label}\t{status}\t{sp}\t{gp}")
            entries.append(CacheEntry(idx, split, s.source_id, s.label, status, strokes, graph))
            idx += 1
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        f.write("\n".join(lines) + "\n")
    return entries


def read_encoding_config(cache_dir: str) -> EncodingConfig:
    with open(os.path.join(cache_dir, "encoding.json")) as f:
        d = json.load(f)
    try:
        return EncodingConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"{cache_dir}/encoding.json: {exc}") from None


def load_cache(cache_dir: str, splits: Iterable[str] | None = None, with_strokes: bool = True) -> list[CacheEntry]:
    path = os.path.join(cache_dir, MANIFEST)
    if not os.path.exists(path):
        raise FormatError(f"{cache_dir}: no {MANIFEST}")
    want = set(splits) if splits is not None else None
    out = []
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(f, 2):
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 columns, got {len(cols)}")
            idx, split, sid, label, status, sp, gp = cols
            if want is not None and split not in want:
                continue
            e = CacheEntry(int(idx), split, sid, int(label), status)
            if e.ok:
                e.graph = load_graph(os.path.join(cache_dir, gp))
                if with_strokes:
                    e.strokes = load_strokes(os.path.join(cache_dir, sp))
            out.append(e)
    return out
