"""Multi-term sliding-window statistics and window labels."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import NUM_CLASSES, FrameSequence, fmt_float
from .errors import ConfigError, InsufficientDataError, SchemaError

log = logging.getLogger(__name__)

STATS = ("mean", "std", "max_change", "slope")
DEFAULT_TERMS = {"short": 1.0, "middle": 6.0, "long": 12.0}
OPTIONAL_TERM = ("optional_mid", 3.0)


@dataclass(frozen=True)
class WindowConfig:
    terms: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TERMS))
    stride: float = 0.2
    fps: float = 30.0

    def __post_init__(self):
        if "short" not in self.terms:
            raise ConfigError("window terms must include 'short'")
        if self.stride <= 0 or self.fps <= 0:
            raise ConfigError("stride and fps must be positive")
        for name, sec in self.terms.items():
            if sec <= 0:
                raise ConfigError(f"term {name!r} has non-positive length {sec}")
            if round(sec * self.fps) < 2:
                raise ConfigError(f"term {name!r} spans fewer than 2 frames at {self.fps} fps")
        # keep terms ordered by window length
        object.__setattr__(self, "terms", dict(sorted(self.terms.items(), key=lambda kv: kv[1])))

    @classmethod
    def default(cls, fps: float = 30.0, stride: float = 0.2, use_3s_term: bool = False):
        terms = dict(DEFAULT_TERMS)
        if use_3s_term:
            terms[OPTIONAL_TERM[0]] = OPTIONAL_TERM[1]
        return cls(terms, stride, fps)

    @property
    def w_max(self) -> float:
        return max(self.terms.values())

    def frames(self, term: str) -> int:
        return max(2, int(round(self.terms[term] * self.fps)))


def anchor_times(duration: float, w_max: float, stride: float) -> np.ndarray:
    """Right-edge anchors w_max, w_max + stride, ... not exceeding ``duration``."""
    if duration < w_max - 1e-9:
        return np.empty(0)
    count = int(math.floor((duration - w_max) / stride + 1e-9)) + 1
    return w_max + stride * np.arange(count)


def slope(values, timestamps) -> float:
    """Least-squares slope of ``values`` against ``timestamps``."""
    y = np.asarray(values, dtype=float)
    t = np.asarray(timestamps, dtype=float)
    if len(y) < 2:
        raise InsufficientDataError("slope needs at least 2 points")
    if len(t) != len(y):
        raise SchemaError("values and timestamps differ in length")
    tc = t - t.mean()
    denom = float(np.dot(tc, tc))
    if denom == 0 or not np.all(np.diff(t) > 0):
        raise ValueError("timestamps must be strictly increasing")
    return float(np.dot(tc, y - y.mean()) / denom)


def window_stats(values, timestamps) -> tuple[float, float, float, float]:
    y = np.asarray(values, dtype=float)
    b = slope(y, timestamps)
    m = y.mean()
    return float(m), float(np.sqrt(np.mean((y - m) ** 2))), float(y.max() - y.min()), b


def aggregate_label_regression(labels) -> float:
    labels = np.asarray(labels, dtype=float)
    if len(labels) == 0:
        raise InsufficientDataError("no labels to aggregate")
    return float(labels.mean())


def aggregate_label_classification(labels) -> int:
    """Most frequent class; ties go to the smallest class id."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise InsufficientDataError("no labels to aggregate")
    return int(np.argmax(np.bincount(labels, minlength=NUM_CLASSES)))


def _batch_stats(x: np.ndarray, t: np.ndarray, ends: np.ndarray, width: int) -> np.ndarray:
    """Stats for windows ``[e - width, e)`` of every column of ``x``.

    Returns (n_windows, dim * 4) with columns grouped per input feature.
    """
    starts = ends - width
    xw = sliding_window_view(x, width, axis=0)[starts]          # (n, dim, width)
    tw = sliding_window_view(t, width)[starts][:, None, :]     # (n, 1, width)
    mean = xw.mean(axis=2)
    centered = xw - mean[:, :, None]
    std = np.sqrt((centered ** 2).mean(axis=2))
    change = xw.max(axis=2) - xw.min(axis=2)
    tc = tw - tw.mean(axis=2, keepdims=True)
    sl = (tc * centered).sum(axis=2) / (tc ** 2).sum(axis=2)
    out = np.stack([mean, std, change, sl], axis=2)             # (n, dim, 4)
    return out.reshape(len(ends), -1)


@dataclass(frozen=True)
class WindowedSample:
    video_id: str
    anchor: float
    term_features: dict[str, dict[str, np.ndarray]]
    term_labels: dict[str, dict[str, float]]


@dataclass
class WindowedDataset:
    """Column-oriented store of windowed samples.

    ``features[term][group]`` is (n, 4 * dim); ``labels[term][task]`` is (n,).
    """

    video_ids: np.ndarray
    anchors: np.ndarray
    terms: dict[str, float]
    groups: dict[str, int]
    tasks: tuple[str, ...]
    features: dict[str, dict[str, np.ndarray]]
    labels: dict[str, dict[str, np.ndarray]]
    group_columns: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self):
        return len(self.anchors)

    def __getitem__(self, i: int) -> WindowedSample:
        return WindowedSample(
            str(self.video_ids[i]), float(self.anchors[i]),
            {t: {g: m[i] for g, m in gm.items()} for t, gm in self.features.items()},
            {t: {k: v[i].item() for k, v in lm.items()} for t, lm in self.labels.items()})

    def __iter__(self) -> Iterator[WindowedSample]:
        return (self[i] for i in range(len(self)))

    @property
    def n_features(self) -> int:
        return len(self.terms) * sum(4 * d for d in self.groups.values())

    def label(self, task: str, term: str = "short") -> np.ndarray:
        return self.labels[term][task]

    def subset(self, index) -> WindowedDataset:
        index = np.asarray(index)
        return WindowedDataset(
            self.video_ids[index], self.anchors[index], dict(self.terms), dict(self.groups),
            self.tasks,
            {t: {g: m[index] for g, m in gm.items()} for t, gm in self.features.items()},
            {t: {k: v[index] for k, v in lm.items()} for t, lm in self.labels.items()},
            dict(self.group_columns))

    def schema_dict(self) -> dict:
        return {"terms": self.terms, "groups": self.groups, "tasks": list(self.tasks),
                "group_columns": {g: list(c) for g, c in self.group_columns.items()}}

    def column_names(self) -> list[str]:
        cols = []
        for term in self.terms:
            for g, dim in self.groups.items():
                names = self.group_columns.get(g) or tuple(f"{g}_{i}" for i in range(dim))
                cols += [f"{term}.{g}.{c}.{s}" for c in names for s in STATS]
        return cols

    def label_columns(self) -> list[str]:
        return [f"label.{term}.{task}" for term in self.terms for task in self.tasks]


def empty_dataset(cfg: WindowConfig, groups: dict[str, int], tasks: Sequence[str],
                  group_columns=None) -> WindowedDataset:
    return WindowedDataset(
        np.empty(0, dtype=object), np.empty(0), dict(cfg.terms), dict(groups), tuple(tasks),
        {t: {g: np.empty((0, 4 * d)) for g, d in groups.items()} for t in cfg.terms},
        {t: {k: np.empty(0, dtype=np.int64 if k == "expression" else float) for k in tasks}
         for t in cfg.terms},
        dict(group_columns or {}))


def extract_multiterm(seq: FrameSequence, cfg: WindowConfig, tasks: Sequence[str],
                      group_columns=None) -> WindowedDataset:
    """Windowed samples for one video.

    Every term window is right-aligned at a shared anchor. Samples whose
    windows touch an invalid label (for any requested task) or a flagged
    frame are skipped.
    """
    tasks = tuple(tasks)
    groups = {g: m.shape[1] for g, m in seq.features.items()}
    for task in tasks:
        if task not in seq.labels:
            raise SchemaError(f"{seq.video_id}: no {task} labels attached")
    if abs(seq.fps - cfg.fps) > 1e-9:
        raise SchemaError(f"{seq.video_id}: fps {seq.fps} differs from window config {cfg.fps}")
    anchors = anchor_times(seq.duration, cfg.w_max, cfg.stride)
    if len(anchors) == 0:
        log.warning("%s: %.2f s is shorter than the longest window (%.2f s); no samples",
                    seq.video_id, seq.duration, cfg.w_max)
        return empty_dataset(cfg, groups, tasks, group_columns)

    ends = np.rint(anchors * cfg.fps).astype(np.int64)
    ends = np.minimum(ends, seq.n_frames)
    # a window is usable when every frame in it is ok and labelled for every task
    bad = ~seq.frame_ok
    for task in tasks:
        bad = bad | ~seq.labels[task].valid
    bad_cum = np.concatenate([[0], np.cumsum(bad)])
    keep = np.ones(len(ends), dtype=bool)
    for term in cfg.terms:
        w = cfg.frames(term)
        keep &= (bad_cum[ends] - bad_cum[ends - w]) == 0
    anchors, ends = anchors[keep], ends[keep]

    features, labels = {}, {}
    for term in cfg.terms:
        w = cfg.frames(term)
        features[term] = {g: _batch_stats(m, seq.timestamps, ends, w)
                          for g, m in seq.features.items()}
        labels[term] = {}
        for task in tasks:
            vals = sliding_window_view(seq.labels[task].values, w)[ends - w]
            if task == "expression":
                counts = np.stack([(vals == c).sum(axis=1) for c in range(NUM_CLASSES)], axis=1)
                labels[term][task] = np.argmax(counts, axis=1).astype(np.int64)
            else:
                labels[term][task] = vals.mean(axis=1)
    return WindowedDataset(
        np.array([seq.video_id] * len(anchors), dtype=object), anchors, dict(cfg.terms),
        groups, tasks, features, labels, dict(group_columns or {}))


def concat(parts: Sequence[WindowedDataset]) -> WindowedDataset:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to concatenate")
    first = parts[0]
    for p in parts[1:]:
        if p.terms != first.terms or p.groups != first.groups or p.tasks != first.tasks:
            raise SchemaError("cannot concatenate windowed datasets with different schemas")
    return WindowedDataset(
        np.concatenate([p.video_ids for p in parts]),
        np.concatenate([p.anchors for p in parts]),
        dict(first.terms), dict(first.groups), first.tasks,
        {t: {g: np.concatenate([p.features[t][g] for p in parts]) for g in first.groups}
         for t in first.terms},
        {t: {k: np.concatenate([p.labels[t][k] for p in parts]) for k in first.tasks}
         for t in first.terms},
        dict(first.group_columns))


def extract_dataset(seqs: Sequence[FrameSequence], cfg: WindowConfig, tasks: Sequence[str],
                    group_columns=None) -> WindowedDataset:
    """Extract every video and order samples by (video_id, anchor)."""
    seqs = sorted(seqs, key=lambda s: s.video_id)
    return concat([extract_multiterm(s, cfg, tasks, group_columns) for s in seqs])


def save_windowed(ds: WindowedDataset, path) -> None:
    """CSV (one row per sample) plus a ``<name>.schema.json`` sidecar."""
    path = Path(path)
    header = ["video_id", "anchor"] + ds.column_names() + ds.label_columns()
    feat = np.hstack([ds.features[t][g] for t in ds.terms for g in ds.groups])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [ds.video_ids[i], fmt_float(ds.anchors[i])]
            row += [fmt_float(v) for v in feat[i]]
            for t in ds.terms:
                for k in ds.tasks:
                    v = ds.labels[t][k][i]
                    row.append(str(int(v)) if k == "expression" else fmt_float(v))
            w.writerow(row)
    with open(schema_path(path), "w") as fh:
        json.dump(ds.schema_dict(), fh, indent=2)


def schema_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".schema.json")


def load_windowed(path) -> WindowedDataset:
    path = Path(path)
    with open(schema_path(path)) as fh:
        schema = json.load(fh)
    terms = {k: float(v) for k, v in schema["terms"].items()}
    groups = {k: int(v) for k, v in schema["groups"].items()}
    tasks = tuple(schema["tasks"])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    n_feat = len(terms) * sum(4 * d for d in groups.values())
    expected = 2 + n_feat + len(terms) * len(tasks)
    if len(header) != expected:
        raise SchemaError(f"{path}: {len(header)} columns, schema implies {expected}")
    video_ids = np.array([r[0] for r in rows], dtype=object)
    if rows:
        body = np.array([[float(c) for c in r[1:]] for r in rows])
    else:
        body = np.empty((0, expected - 1))
    anchors = body[:, 0]
    features, pos = {}, 1
    for t in terms:
        features[t] = {}
        for g, d in groups.items():
            features[t][g] = body[:, pos:pos + 4 * d]
            pos += 4 * d
    labels = {}
    for t in terms:
        labels[t] = {}
        for k in tasks:
            col = body[:, pos]
            labels[t][k] = col.astype(np.int64) if k == "expression" else col
            pos += 1
    cols = {g: tuple(c) for g, c in schema.get("group_columns", {}).items()}
    return WindowedDataset(video_ids, anchors, terms, groups, tasks, features, labels, cols)
