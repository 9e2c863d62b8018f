"""PCA for deep-embedding groups, on a Jacobi symmetric eigensolver."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def _round_robin(m: int):
    """Yield the m - 1 rounds of disjoint pairs covering every pair of 0..m-1 once (m even)."""
    players = list(range(m))
    for _ in range(m - 1):
        yield [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        players = [players[0], players[-1]] + players[1:-1]


def _off_norm(a):
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return np.sqrt(np.sum(off * off))


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each step rotates a full set of disjoint index pairs at once
    (round-robin ordering), so a sweep costs d - 1 vectorized updates.
    Returns (eigenvalues, eigenvectors as columns), unsorted.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    d = a.shape[0]
    v = np.eye(d)
    if d == 1:
        return a.diagonal().copy(), v
    a = (a + a.T) / 2
    m = d + (d % 2)
    rounds = []
    for pairs in _round_robin(m):
        pairs = [(p, q) for p, q in pairs if p < d and q < d]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
    scale = np.sqrt(np.sum(a * a)) or 1.0
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= tol * scale:
            break
        for P, Q in rounds:
            apq = a[P, Q]
            app, aqq = a[P, P], a[Q, Q]
            nz = apq != 0
            theta = np.where(nz, (aqq - app) / (2 * np.where(nz, apq, 1.0)), 0.0)
            sgn = np.where(theta >= 0, 1.0, -1.0)
            t = np.where(nz, sgn / (np.abs(theta) + np.sqrt(theta * theta + 1)), 0.0)
            c = 1 / np.sqrt(1 + t * t)
            s = t * c
            rp, rq = a[P, :].copy(), a[Q, :].copy()
            a[P, :] = c[:, None] * rp - s[:, None] * rq
            a[Q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, P].copy(), a[:, Q].copy()
            a[:, P] = cp * c - cq * s
            a[:, Q] = cp * s + cq * c
            vp, vq = v[:, P].copy(), v[:, Q].copy()
            v[:, P] = vp * c - vq * s
            v[:, Q] = vp * s + vq * c
    return a.diagonal().copy(), v


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing
    total_variance: float
    n_degenerate: int = 0           # trailing components spanning zero variance

    @property
    def d(self) -> int:
        return self.components.shape[1]

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "components": self.components.tolist(),
                "explained_variance": self.explained_variance.tolist(),
                "total_variance": self.total_variance, "n_degenerate": self.n_degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> PcaModel:
        return cls(np.asarray(d["mean"], dtype=float),
                   np.asarray(d["components"], dtype=float).reshape(-1, len(d["mean"])),
                   np.asarray(d["explained_variance"], dtype=float),
                   float(d["total_variance"]), int(d.get("n_degenerate", 0)))


def fit_pca(data, k: int, solver: str = "jacobi") -> PcaModel:
    """Top-``k`` principal axes of the sample covariance.

    Each component is signed so its largest-magnitude entry is positive.
    ``solver="lapack"`` swaps the Jacobi eigensolver for ``numpy.linalg.eigh``
    (useful for very wide inputs).
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k={k} outside [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    if solver == "jacobi":
        vals, vecs = jacobi_eigh(cov)
    elif solver == "lapack":
        vals, vecs = np.linalg.eigh(cov)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    order = np.argsort(-vals, kind="stable")[:k]
    vals = np.clip(vals[order], 0.0, None)
    comps = vecs[:, order].T.copy()
    lead = np.argmax(np.abs(comps), axis=1)
    comps *= np.where(comps[np.arange(k), lead] < 0, -1.0, 1.0)[:, None]
    total = float(np.trace(cov))
    degenerate = vals <= 1e-12 * max(total, 1e-300)
    vals[degenerate] = 0.0
    return PcaModel(mean, comps, vals, total, int(degenerate.sum()))


def transform_pca(model: PcaModel, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != model.d:
        raise ShapeError(f"expected (n, {model.d}) rows, got {rows.shape}")
    return (rows - model.mean) @ model.components.T


def inverse_transform_pca(model: PcaModel, z) -> np.ndarray:
    return np.asarray(z, dtype=float) @ model.components + model.mean
