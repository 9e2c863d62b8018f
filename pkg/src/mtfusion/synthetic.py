"""Seeded synthetic corpora with multi-scale latent structure.

Each video carries six latent Ornstein-Uhlenbeck walks: a fast (~1 s),
medium (~6 s) and slow (~12 s) pair. Valence and arousal are fixed mixtures
of them, expression is a 7-way quantization of the (valence, arousal)
plane with a dominant neutral disc, and every feature group observes a
noisy, group-specific linear view of the latents.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (FeatureGroupSpec, FrameSequence, LabelTrack, fmt_float, write_feature_table,
                   write_labels)

SCALES = (1.0, 6.0, 12.0)
LATENT_NAMES = ("fast_a", "medium_a", "slow_a", "fast_b", "medium_b", "slow_b")
VALENCE_MIX = np.array([0.25, 0.30, 0.35, 0.0, 0.0, 0.0])
AROUSAL_MIX = np.array([0.10, 0.10, 0.15, 0.25, 0.25, 0.30])
DESK_DIMS = {"au_intensity": 8, "au_occurrence": 6, "head_pose": 6, "gaze": 4, "pose": 9,
             "deep": 16}
# which latents each group sees (others get zero loading)
GROUP_VIEWS = {
    "au_intensity": (0, 1, 2, 3, 4, 5),
    "au_occurrence": (0, 3),
    "head_pose": (1, 2, 4, 5),
    "gaze": (0, 1, 3, 4),
    "pose": (2, 5, 1, 4),
    "deep": (0, 1, 2, 3, 4, 5),
}


@dataclass(frozen=True)
class SyntheticSpec:
    videos: int = 50
    valid_videos: int = 10
    duration: float = 60.0
    fps: float = 10.0
    seed: int = 7
    dims: dict = field(default_factory=lambda: dict(DESK_DIMS))
    noise: float = 12.0
    neutral_fraction: float = 0.68

    def schema(self) -> list[FeatureGroupSpec]:
        return [FeatureGroupSpec(g, int(d)) for g, d in self.dims.items()]


def ou_walk(rng, n: int, dt: float, tau: float) -> np.ndarray:
    """Unit-variance stationary OU path sampled every ``dt`` seconds."""
    phi = np.exp(-dt / tau)
    eps = rng.standard_normal(n) * np.sqrt(1 - phi * phi)
    x = np.empty(n)
    x[0] = rng.standard_normal()
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i]
    return x


def va_from_latents(latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    valence = np.clip(latents @ VALENCE_MIX, -1, 1)
    arousal = np.clip(latents @ AROUSAL_MIX, -1, 1)
    return valence, arousal


def expression_from_va(valence, arousal, radius: float) -> np.ndarray:
    """Neutral inside ``radius``; otherwise one of six angular sectors (classes 1..6)."""
    r = np.hypot(valence, arousal)
    sector = np.floor((np.arctan2(arousal, valence) + np.pi) / (2 * np.pi) * 6).astype(np.int64)
    return np.where(r < radius, 0, 1 + np.minimum(sector, 5))


def neutral_radius(fraction: float) -> float:
    """Radius enclosing ``fraction`` of the stationary (valence, arousal) distribution.

    Unclipped valence/arousal are jointly Gaussian; the radius is taken from
    a fixed large Monte-Carlo sample so it is identical for every corpus.
    """
    rng = np.random.default_rng(12345)
    lat = rng.standard_normal((200_000, len(LATENT_NAMES)))
    v, a = va_from_latents(lat)
    return float(np.quantile(np.hypot(v, a), fraction))


def _mixing(rng, dims):
    mixes = {}
    for g, d in dims.items():
        w = rng.normal(size=(len(LATENT_NAMES), d))
        mask = np.zeros(len(LATENT_NAMES), dtype=bool)
        mask[list(GROUP_VIEWS[g])] = True
        w[~mask] = 0.0
        mixes[g] = w
    return mixes


def generate(spec: SyntheticSpec):
    """Yield (FrameSequence with labels attached, latents, split) per video, in id order."""
    rng = np.random.default_rng(spec.seed)
    mixes = _mixing(rng, spec.dims)
    radius = neutral_radius(spec.neutral_fraction)
    n = int(round(spec.duration * spec.fps))
    dt = 1.0 / spec.fps
    total = spec.videos
    for i in range(total):
        vid = f"video_{i:04d}"
        split = "valid" if i >= total - spec.valid_videos else "train"
        vrng = np.random.default_rng([spec.seed, i])
        latents = np.column_stack([ou_walk(vrng, n, dt, SCALES[j % 3])
                                   for j in range(len(LATENT_NAMES))])
        valence, arousal = va_from_latents(latents)
        expression = expression_from_va(valence, arousal, radius)
        features = {}
        for g, w in mixes.items():
            obs = latents @ w + spec.noise * vrng.standard_normal((n, w.shape[1]))
            if g == "au_occurrence":
                obs = (obs > 0).astype(float)
            features[g] = obs
        seq = FrameSequence(vid, spec.fps, np.arange(n) / spec.fps, features)
        for task, vals in (("valence", valence), ("arousal", arousal),
                           ("expression", expression)):
            seq = seq.with_labels(LabelTrack(task, vals, np.ones(n, dtype=bool)))
        yield seq, latents, split


def write_corpus(spec: SyntheticSpec, out) -> Path:
    """Write a corpus directory: ``corpus.json`` plus one folder of CSVs per video."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    schema = spec.schema()
    videos = []
    for seq, latents, split in generate(spec):
        vdir = out / seq.video_id
        vdir.mkdir(exist_ok=True)
        for source in dict.fromkeys(g.source for g in schema):
            write_feature_table(vdir / f"{source}.csv", seq, schema, source)
        for task, track in seq.labels.items():
            write_labels(vdir / f"{task}.csv", track)
        with open(vdir / "latents.csv", "w") as fh:
            fh.write(",".join(LATENT_NAMES) + "\n")
            for row in latents:
                fh.write(",".join(fmt_float(v) for v in row) + "\n")
        videos.append({"id": seq.video_id, "split": split})
    manifest = {
        "fps": spec.fps,
        "schema": [{"name": g.name, "dim": g.dim, "source": g.source} for g in schema],
        "videos": videos,
        "synthetic_spec": asdict(spec),
    }
    with open(out / "corpus.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out
