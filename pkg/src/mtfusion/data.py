"""Frame-level dataset representation, CSV ingestion and standardization."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyInputError, ParseError, SchemaError

GROUP_NAMES = ("au_intensity", "au_occurrence", "head_pose", "gaze", "pose", "deep")
TASKS = ("valence", "arousal", "expression")
NUM_CLASSES = 7

DEFAULT_DIMS = {
    "au_intensity": 17,
    "au_occurrence": 18,
    "head_pose": 6,
    "gaze": 8,
    "pose": 75,
    "deep": 2048,
}

# which per-video CSV a group is read from
DEFAULT_SOURCES = {
    "au_intensity": "openface",
    "au_occurrence": "openface",
    "head_pose": "openface",
    "gaze": "openface",
    "pose": "pose",
    "deep": "deep",
}

_AU_R = ["01", "02", "04", "05", "06", "07", "09", "10", "12", "14", "15", "17",
         "20", "23", "25", "26", "45"]
_AU_C = ["01", "02", "04", "05", "06", "07", "09", "10", "12", "14", "15", "17",
         "20", "23", "25", "26", "28", "45"]
_OPENFACE_COLUMNS = {
    "au_intensity": [f"AU{a}_r" for a in _AU_R],
    "au_occurrence": [f"AU{a}_c" for a in _AU_C],
    "head_pose": ["pose_Tx", "pose_Ty", "pose_Tz", "pose_Rx", "pose_Ry", "pose_Rz"],
    "gaze": ["gaze_0_x", "gaze_0_y", "gaze_0_z", "gaze_1_x", "gaze_1_y", "gaze_1_z",
             "gaze_angle_x", "gaze_angle_y"],
}


def fmt_float(v) -> str:
    return "%.9g" % float(v)


def default_columns(name: str, dim: int) -> tuple[str, ...]:
    """Extractor-style column names; falls back to ``<group>_<i>`` past the known list."""
    if name in _OPENFACE_COLUMNS:
        known = _OPENFACE_COLUMNS[name]
    elif name == "pose":
        known = [f"kp{j}_{ax}" for j in range(25) for ax in ("x", "y", "c")]
    else:
        known = []
    cols = list(known[:dim])
    cols += [f"{name}_{i}" for i in range(len(cols), dim)]
    return tuple(cols)


@dataclass(frozen=True)
class FeatureGroupSpec:
    name: str
    dim: int
    columns: tuple[str, ...] = ()
    source: str = ""

    def __post_init__(self):
        if self.name not in GROUP_NAMES:
            raise SchemaError(f"unknown feature group {self.name!r}")
        if int(self.dim) < 1:
            raise SchemaError(f"group {self.name!r} must have dim >= 1, got {self.dim}")
        if not self.columns:
            object.__setattr__(self, "columns", default_columns(self.name, self.dim))
        if len(self.columns) != self.dim:
            raise SchemaError(
                f"group {self.name!r}: {len(self.columns)} columns for dim {self.dim}")
        if not self.source:
            object.__setattr__(self, "source", DEFAULT_SOURCES[self.name])


def default_schema(**dims: int) -> list[FeatureGroupSpec]:
    """Schema with the extractor defaults, overriding dims by keyword."""
    return [FeatureGroupSpec(name, dims.get(name, DEFAULT_DIMS[name])) for name in GROUP_NAMES]


def check_schema(schema: Sequence[FeatureGroupSpec]) -> None:
    names = [g.name for g in schema]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate group names in schema: {names}")
    if not schema:
        raise SchemaError("schema has no groups")


@dataclass(frozen=True)
class LabelTrack:
    """Per-frame labels with an explicit validity mask."""

    task: str
    values: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class FrameSequence:
    video_id: str
    fps: float
    timestamps: np.ndarray
    features: dict[str, np.ndarray]
    labels: dict[str, LabelTrack] = field(default_factory=dict)
    # False where the raw row held a non-finite value (value replaced by 0)
    frame_ok: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.timestamps)
        for name, mat in self.features.items():
            if mat.shape[0] != n:
                raise SchemaError(
                    f"{self.video_id}: group {name} has {mat.shape[0]} frames, expected {n}")
        if self.frame_ok is None:
            object.__setattr__(self, "frame_ok", np.ones(n, dtype=bool))
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise SchemaError(f"{self.video_id}: timestamps must strictly increase")

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)

    @property
    def duration(self) -> float:
        """Time covered by the frames: n/fps."""
        return self.n_frames / self.fps

    def with_labels(self, track: LabelTrack) -> FrameSequence:
        if len(track) != self.n_frames:
            raise SchemaError(
                f"{self.video_id}: {track.task} labels have {len(track)} rows, "
                f"features have {self.n_frames}")
        labels = dict(self.labels)
        labels[track.task] = track
        return FrameSequence(self.video_id, self.fps, self.timestamps, self.features,
                             labels, self.frame_ok)

    def with_features(self, features: dict[str, np.ndarray]) -> FrameSequence:
        return FrameSequence(self.video_id, self.fps, self.timestamps, features,
                             self.labels, self.frame_ok)


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyInputError(f"{path}: empty file")
    return rows[0], rows[1:]


def _parse_matrix(path, header, rows, columns) -> np.ndarray:
    index = {name: i for i, name in enumerate(header)}
    for col in columns:
        if col not in index:
            raise SchemaError(f"{path}: missing column {col!r}")
    pos = [index[c] for c in columns]
    out = np.empty((len(rows), len(columns)))
    for r, row in enumerate(rows):
        for j, p in enumerate(pos):
            try:
                out[r, j] = float(row[p])
            except (ValueError, IndexError):
                cell = row[p] if p < len(row) else ""
                raise ParseError(
                    f"{path}: row {r + 1} column {columns[j]!r}: not a number: {cell!r}"
                ) from None
    return out


def load_feature_table(path, schema: Sequence[FeatureGroupSpec], fps: float = 30.0,
                       video_id: str | None = None) -> FrameSequence:
    """Read one CSV holding every group of ``schema``.

    Timestamps come from a ``timestamp`` column when present, otherwise from
    ``row_index / fps``. Non-finite cells are replaced by 0 and their rows
    flagged in ``frame_ok``.
    """
    check_schema(schema)
    path = Path(path)
    header, rows = _read_rows(path)
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")
    features = {g.name: _parse_matrix(path, header, rows, g.columns) for g in schema}
    if "timestamp" in header:
        timestamps = _parse_matrix(path, header, rows, ["timestamp"])[:, 0]
    else:
        timestamps = np.arange(len(rows)) / fps
    return _finalize(video_id or path.stem, fps, timestamps, features)


def _finalize(video_id, fps, timestamps, features) -> FrameSequence:
    n = len(timestamps)
    ok = np.ones(n, dtype=bool)
    for mat in features.values():
        ok &= np.isfinite(mat).all(axis=1)
    if not ok.all():
        features = {k: np.where(np.isfinite(v), v, 0.0) for k, v in features.items()}
    return FrameSequence(video_id, float(fps), timestamps, features, {}, ok)


def load_video(files: Mapping[str, str | Path], schema: Sequence[FeatureGroupSpec],
               fps: float, video_id: str) -> FrameSequence:
    """Join the per-source CSVs of one video (``files`` maps source -> path) by frame index."""
    check_schema(schema)
    features: dict[str, np.ndarray] = {}
    n_rows = None
    for source in dict.fromkeys(g.source for g in schema):
        if source not in files:
            raise SchemaError(f"{video_id}: no file for source {source!r}")
        path = Path(files[source])
        header, rows = _read_rows(path)
        if not rows:
            raise EmptyInputError(f"{path}: no data rows")
        if n_rows is not None and len(rows) != n_rows:
            raise SchemaError(
                f"{path}: {len(rows)} rows but other sources of {video_id} have {n_rows}")
        n_rows = len(rows)
        for g in schema:
            if g.source == source:
                features[g.name] = _parse_matrix(path, header, rows, g.columns)
    timestamps = np.arange(n_rows) / fps
    return _finalize(video_id, fps, timestamps, features)


def write_feature_table(path, seq: FrameSequence, schema: Sequence[FeatureGroupSpec],
                        source: str | None = None) -> None:
    """Write the groups of ``seq`` (optionally one source only) as a CSV with a header row.

    Values use 9 significant digits; a table read from such a file writes back
    to identical text, so load -> write -> load is value-identical.
    """
    groups = [g for g in schema if source is None or g.source == source]
    header = [c for g in groups for c in g.columns]
    mat = np.hstack([seq.features[g.name] for g in groups])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in mat:
            w.writerow([fmt_float(v) for v in row])


def _valid_label(task: str, value: float) -> bool:
    if not math.isfinite(value):
        return False
    if task == "expression":
        return value == int(value) and 0 <= value < NUM_CLASSES
    return -1.0 <= value <= 1.0


def load_labels(path, task: str) -> LabelTrack:
    """One label per row; blank, unparsable or out-of-range cells become invalid.

    A first row that does not parse as a number is taken as a header.
    """
    if task not in TASKS:
        raise SchemaError(f"unknown task {task!r}")
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r[0].strip() if r else "" for r in csv.reader(fh)]
    if rows:
        try:
            float(rows[0])
        except ValueError:
            if rows[0] != "":
                rows = rows[1:]
    values = np.zeros(len(rows))
    valid = np.zeros(len(rows), dtype=bool)
    for i, cell in enumerate(rows):
        try:
            v = float(cell)
        except ValueError:
            continue
        if _valid_label(task, v):
            values[i] = v
            valid[i] = True
    if task == "expression":
        values = values.astype(np.int64)
    return LabelTrack(task, values, valid)


def label_track(task: str, values: Iterable[float]) -> LabelTrack:
    """Build a track from raw values, applying the same range rule as ``load_labels``."""
    raw = np.asarray(list(values), dtype=float)
    valid = np.array([_valid_label(task, v) for v in raw], dtype=bool)
    vals = np.where(valid, raw, 0.0)
    if task == "expression":
        vals = vals.astype(np.int64)
    return LabelTrack(task, vals, valid)


def write_labels(path, track: LabelTrack) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([track.task])
        for v, ok in zip(track.values, track.valid):
            if not ok:
                w.writerow(["-5"])
            elif track.task == "expression":
                w.writerow([int(v)])
            else:
                w.writerow([fmt_float(v)])


@dataclass(frozen=True)
class StandardizerStats:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def constant(self, group: str) -> np.ndarray:
        return self.std[group] == 0

    def to_dict(self) -> dict:
        return {g: {"mean": self.mean[g].tolist(), "std": self.std[g].tolist()}
                for g in self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> StandardizerStats:
        return cls({g: np.asarray(v["mean"], dtype=float) for g, v in d.items()},
                   {g: np.asarray(v["std"], dtype=float) for g, v in d.items()})


def fit_standardizer(train: Sequence[FrameSequence]) -> StandardizerStats:
    """Per-column mean and population std over every usable training frame."""
    train = list(train)
    if not train or sum(int(s.frame_ok.sum()) for s in train) == 0:
        raise EmptyInputError("cannot fit a standardizer on zero frames")
    groups = list(train[0].features)
    mean, std = {}, {}
    for g in groups:
        stacked = np.vstack([s.features[g][s.frame_ok] for s in train])
        m = stacked.mean(axis=0)
        sd = np.sqrt(((stacked - m) ** 2).mean(axis=0))
        # exact zero for columns that never vary, regardless of rounding in the mean
        sd[(stacked == stacked[0]).all(axis=0)] = 0.0
        mean[g], std[g] = m, sd
    return StandardizerStats(mean, std)


def standardize(seq: FrameSequence, stats: StandardizerStats) -> FrameSequence:
    features = {}
    for g, mat in seq.features.items():
        if g not in stats.mean:
            raise SchemaError(f"standardizer has no statistics for group {g!r}")
        m, sd = stats.mean[g], stats.std[g]
        if len(m) != mat.shape[1]:
            raise SchemaError(
                f"group {g!r}: standardizer has {len(m)} columns, data has {mat.shape[1]}")
        const = sd == 0
        scaled = (mat - m) / np.where(const, 1.0, sd)
        features[g] = np.where(const, mat, scaled)
    return seq.with_features(features)
