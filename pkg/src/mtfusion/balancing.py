"""Rebalancing of windowed training sets (expression classes, 8x8 valence-arousal grid).

Both routines halve an over-represented part (seeded choice without
replacement, keeping ceil(n/2)) and duplicate every other sample once.
Output rows are copies of input rows, in input order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .windowing import WindowedDataset

NEUTRAL = 0
BINS = 8
BIN_WIDTH = 2.0 / BINS
DEFAULT_CENTER = frozenset(a * BINS + v for a in (3, 4) for v in (3, 4))


@dataclass(frozen=True)
class VaGrid:
    center_region: frozenset[int] = field(default=DEFAULT_CENTER)
    bins_per_axis: int = BINS

    def __post_init__(self):
        bad = [r for r in self.center_region if not 0 <= r < self.bins_per_axis ** 2]
        if bad:
            raise ValueError(f"region ids out of range: {sorted(bad)}")
        object.__setattr__(self, "center_region", frozenset(int(r) for r in self.center_region))


def _axis_bin(x):
    x = np.asarray(x, dtype=float)
    if np.any((x < -1) | (x > 1)) or not np.all(np.isfinite(x)):
        raise ValueError("valence/arousal must lie in [-1, 1]")
    return np.minimum(np.floor((x + 1) / BIN_WIDTH), BINS - 1).astype(np.int64)


def va_region_index(valence, arousal):
    """Region id ``a_bin * 8 + v_bin``; works on scalars or arrays."""
    ids = _axis_bin(arousal) * BINS + _axis_bin(valence)
    return int(ids) if np.ndim(ids) == 0 else ids


def _halve_or_double(keys: np.ndarray, halve: np.ndarray, seed: int) -> np.ndarray:
    """Row indices after halving rows where ``halve`` and duplicating the rest."""
    rng = np.random.default_rng(seed)
    keep = np.zeros(len(keys), dtype=np.int64)
    for key in np.unique(keys[halve]):
        idx = np.flatnonzero(halve & (keys == key))
        chosen = rng.choice(idx, size=math.ceil(len(idx) / 2), replace=False)
        keep[chosen] = 1
    keep[~halve] = 2
    return np.repeat(np.arange(len(keys)), keep)


def balance_expression(ds: WindowedDataset, seed: int = 0, term: str = "short") -> WindowedDataset:
    labels = ds.label("expression", term)
    return ds.subset(_halve_or_double(labels, labels == NEUTRAL, seed))


def balance_va(ds: WindowedDataset, grid: VaGrid | None = None, seed: int = 0,
               term: str = "short") -> WindowedDataset:
    grid = grid or VaGrid()
    regions = va_region_index(ds.label("valence", term), ds.label("arousal", term))
    regions = np.atleast_1d(regions)
    center = np.isin(regions, sorted(grid.center_region))
    return ds.subset(_halve_or_double(regions, center, seed))


def expression_counts(ds: WindowedDataset, term: str = "short") -> dict[int, int]:
    counts = np.bincount(ds.label("expression", term), minlength=7)
    return {c: int(n) for c, n in enumerate(counts)}


def region_counts(ds: WindowedDataset, term: str = "short") -> dict[int, int]:
    regions = np.atleast_1d(va_region_index(ds.label("valence", term), ds.label("arousal", term)))
    counts = np.bincount(regions, minlength=BINS * BINS)
    return {r: int(n) for r, n in enumerate(counts) if n}
