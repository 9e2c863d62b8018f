"""Leaf-wise gradient-boosted decision trees with exact split search.

Regression uses squared error (g = pred - y, h = 1); classification a
7-way softmax with one tree per class per round (g = p - 1{y=c},
h = p(1 - p)). Split gain is

    GL^2/(HL + l2) + GR^2/(HR + l2) - G^2/(H + l2)

scanned over every boundary between distinct sorted feature values, with
the threshold at the midpoint. Samples with ``x <= threshold`` go left.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from numba import njit

from .data import NUM_CLASSES
from .errors import EmptyInputError, ShapeError, UndefinedMetricError
from .metrics import custom_regression_metric, expression_metric

REGRESSION = "regression"
MULTICLASS = "multiclass7"
MIN_GAIN = 1e-12
PRIOR_FLOOR = 1e-12
TUNED_PARAMS = ("num_leaves", "learning_rate", "max_depth", "min_child_samples")
DEFAULT_GRID = {
    "num_leaves": [15, 31, 63],
    "learning_rate": [0.05, 0.1],
    "max_depth": [-1, 6],
    "min_child_samples": [10, 20],
}


@dataclass(frozen=True)
class GbdtParams:
    num_leaves: int = 31
    learning_rate: float = 0.1
    max_depth: int = -1
    min_child_samples: int = 20
    num_rounds: int = 100
    early_stopping_rounds: int = 10
    lambda_l2: float = 0.0
    min_sum_hessian: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.num_leaves < 2:
            raise ValueError("num_leaves must be >= 2")
        if self.min_child_samples < 1:
            raise ValueError("min_child_samples must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth == 0 or self.max_depth < -1:
            raise ValueError("max_depth must be -1 (unlimited) or >= 1")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be >= 0")
        if self.num_rounds < 0 or self.early_stopping_rounds < 1:
            raise ValueError("num_rounds must be >= 0 and early_stopping_rounds >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf.

    ``sum_grad``/``sum_hess``/``count`` are the fit-time statistics of every
    node, kept so split gains can be replayed.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    sum_grad: np.ndarray
    sum_hess: np.ndarray
    count: np.ndarray
    depth: np.ndarray
    default_left: np.ndarray

    _FIELDS = ("feature", "threshold", "left", "right", "value", "gain", "sum_grad",
               "sum_hess", "count", "depth", "default_left")

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf node id reached by every row of ``x``."""
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        for _ in range(self.max_depth):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            f = np.where(internal, feat, 0)
            go_left = x[rows, f] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        ints = {"feature", "left", "right", "count", "depth"}
        return cls(**{k: np.asarray(d[k], dtype=np.int64 if k in ints else
                                    bool if k == "default_left" else float)
                      for k in cls._FIELDS})


@dataclass
class GbdtModel:
    objective: str
    n_features: int
    init_score: np.ndarray                      # (1,) or (7,)
    trees: list[list[Tree | None]]              # one list per round, one slot per output
    params: GbdtParams
    best_iteration: int = 0
    best_score: float = -math.inf
    train_loss: list[float] = field(default_factory=list)
    valid_scores: list[float] = field(default_factory=list)

    @property
    def n_outputs(self) -> int:
        return len(self.init_score)

    def n_trees(self) -> int:
        return sum(t is not None for rnd in self.trees for t in rnd)

    def iter_trees(self):
        for rnd in self.trees[:self.best_iteration]:
            for c, t in enumerate(rnd):
                if t is not None:
                    yield c, t

    def raw_predict(self, x) -> np.ndarray:
        x = _as_matrix(x)
        if x.shape[1] != self.n_features:
            raise ShapeError(f"model expects {self.n_features} columns, got {x.shape[1]}")
        out = np.tile(self.init_score, (len(x), 1))
        for c, t in self.iter_trees():
            out[:, c] += t.predict(x)
        return out

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "n_features": self.n_features,
            "init_score": self.init_score.tolist(),
            "params": self.params.to_dict(),
            "best_iteration": self.best_iteration,
            "best_score": self.best_score if math.isfinite(self.best_score) else None,
            "trees": [[t.to_dict() if t is not None else None for t in rnd]
                      for rnd in self.trees],
            "importance": feature_importance(self).tolist(),
            "train_loss": self.train_loss,
            "valid_scores": [s if math.isfinite(s) else None for s in self.valid_scores],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GbdtModel:
        best = d.get("best_score")
        return cls(
            d["objective"], int(d["n_features"]), np.asarray(d["init_score"], dtype=float),
            [[Tree.from_dict(t) if t is not None else None for t in rnd] for rnd in d["trees"]],
            GbdtParams(**d["params"]), int(d["best_iteration"]),
            -math.inf if best is None else float(best),
            list(d.get("train_loss", [])),
            [-math.inf if s is None else s for s in d.get("valid_scores", [])])


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(model: GbdtModel, x) -> np.ndarray:
    """Regression: (n,) values. Classification: (n, 7) probabilities."""
    raw = model.raw_predict(x)
    if model.objective == REGRESSION:
        return raw[:, 0]
    return softmax(raw)


def feature_importance(model: GbdtModel) -> np.ndarray:
    """Total split gain per feature over the trees used for prediction."""
    imp = np.zeros(model.n_features)
    for _, t in model.iter_trees():
        internal = t.feature >= 0
        np.add.at(imp, t.feature[internal], t.gain[internal])
    return imp


def select_top_features(importance, fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction * n) highest-gain features, ascending; ties -> lower index."""
    importance = np.asarray(importance, dtype=float)
    if importance.size == 0:
        raise ValueError("empty importance vector")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = math.ceil(fraction * len(importance))
    order = np.argsort(-importance, kind="stable")
    return np.sort(order[:k])


@njit(cache=True)
def _scan_splits(s, xs, g, h, gsum, hsum, mcs, min_hess, lam):
    """Best (gain, feature, position) over all features; first maximum wins.

    ``s``/``xs`` hold, per feature row, the node's rows and their values in
    ascending order.
    """
    d, m = s.shape
    parent = gsum * gsum / (hsum + lam)
    best, best_f, best_pos = -np.inf, -1, -1
    for f in range(d):
        gl = 0.0
        hl = 0.0
        for i in range(m - 1):
            r = s[f, i]
            gl += g[r]
            hl += h[r]
            n_left = i + 1
            if n_left < mcs or not xs[f, i] < xs[f, i + 1]:
                continue
            if m - n_left < mcs:
                break
            hr = hsum - hl
            if hl < min_hess or hr < min_hess:
                continue
            gr = gsum - gl
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
            if gain > best:
                best, best_f, best_pos = gain, f, i
    return best, best_f, best_pos


@njit(cache=True)
def _split_rows(s, xs, f, pos, mark):
    """Stable split of every feature row into the first ``pos + 1`` rows of feature ``f`` and the rest."""
    d, m = s.shape
    n_left = pos + 1
    for i in range(n_left):
        mark[s[f, i]] = 1
    n_right = m - n_left
    # branch-free: write to both sides, advance one cursor; the spare slot absorbs the other write
    sl = np.empty((d, n_left + 1), dtype=s.dtype)
    sr = np.empty((d, n_right + 1), dtype=s.dtype)
    xl = np.empty((d, n_left + 1), dtype=xs.dtype)
    xr = np.empty((d, n_right + 1), dtype=xs.dtype)
    for j in range(d):
        a = 0
        b = 0
        for i in range(m):
            r = s[j, i]
            v = xs[j, i]
            go = mark[r]
            sl[j, a] = r
            xl[j, a] = v
            sr[j, b] = r
            xr[j, b] = v
            a += go
            b += 1 - go
    for i in range(n_left):
        mark[s[f, i]] = 0
    return sl[:, :n_left], xl[:, :n_left], sr[:, :n_right], xr[:, :n_right]


class _TreeBuilder:
    """Grows one tree from the presorted root columns."""

    def __init__(self, xt: np.ndarray, params: GbdtParams):
        order = np.argsort(xt, axis=1, kind="stable")
        self.root = (order.astype(np.int32), np.take_along_axis(xt, order, axis=1))
        self.p = params
        self.n = xt.shape[1]
        self._mark = np.zeros(self.n, dtype=np.int64)

    def _best_split(self, node, g, h, gsum, hsum):
        p = self.p
        s, xs = node
        if s.shape[1] < 2 * p.min_child_samples:
            return None
        gain, f, pos = _scan_splits(s, xs, g, h, gsum, hsum, p.min_child_samples,
                                    p.min_sum_hessian, p.lambda_l2)
        if f < 0 or not gain > MIN_GAIN:
            return None
        lo, hi = xs[f, pos], xs[f, pos + 1]
        thr = lo + (hi - lo) / 2
        if not lo <= thr < hi:
            thr = lo
        return float(gain), int(f), int(pos), float(thr)

    def build(self, g, h):
        """Return (tree, {leaf_id: member rows}) or (None, None) if no split has positive gain."""
        p = self.p
        nodes = {k: [] for k in Tree._FIELDS}

        def add(gs, hs, cnt, depth):
            nodes["feature"].append(-1)
            nodes["threshold"].append(0.0)
            nodes["left"].append(-1)
            nodes["right"].append(-1)
            nodes["value"].append(-gs / (hs + p.lambda_l2) * p.learning_rate)
            nodes["gain"].append(0.0)
            nodes["sum_grad"].append(gs)
            nodes["sum_hess"].append(hs)
            nodes["count"].append(cnt)
            nodes["depth"].append(depth)
            nodes["default_left"].append(True)
            return len(nodes["feature"]) - 1

        def can_split(depth):
            return p.max_depth < 0 or depth < p.max_depth

        gs, hs = float(np.sum(g)), float(np.sum(h))
        root = add(gs, hs, self.n, 0)
        split = self._best_split(self.root, g, h, gs, hs) if can_split(0) else None
        if split is None:
            return None, None
        heap = [(-split[0], root, split, self.root)]
        leaves = {root: self.root}
        n_leaves = 1
        while heap and n_leaves < p.num_leaves:
            _, node, (gain, f, pos, thr), (s, xs) = heapq.heappop(heap)
            sl, xl, sr, xr = _split_rows(s, xs, f, pos, self._mark)
            del leaves[node]
            nodes["feature"][node] = f
            nodes["threshold"][node] = thr
            nodes["gain"][node] = gain
            depth = nodes["depth"][node] + 1
            for side, sub in (("left", (sl, xl)), ("right", (sr, xr))):
                rows = sub[0][0]
                cg, ch = float(np.sum(g[rows])), float(np.sum(h[rows]))
                child = add(cg, ch, len(rows), depth)
                nodes[side][node] = child
                leaves[child] = sub
                if can_split(depth):
                    cand = self._best_split(sub, g, h, cg, ch)
                    if cand is not None:
                        heapq.heappush(heap, (-cand[0], child, cand, sub))
            n_leaves += 1
        # internal nodes carry no prediction
        for node, f in enumerate(nodes["feature"]):
            if f >= 0:
                nodes["value"][node] = 0.0
        ints = {"feature", "left", "right", "count", "depth"}
        tree = Tree(**{k: np.asarray(v, dtype=np.int64 if k in ints else
                                     bool if k == "default_left" else float)
                       for k, v in nodes.items()})
        return tree, {leaf: sub[0][0] for leaf, sub in leaves.items()}


def _loss(objective, raw, y) -> float:
    if objective == REGRESSION:
        return float(np.mean((raw[:, 0] - y) ** 2))
    z = raw - raw.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def _safe_metric(metric, pred, y) -> float:
    try:
        v = float(metric(pred, y))
    except UndefinedMetricError:
        return -math.inf
    return v if math.isfinite(v) else -math.inf


def _fit(objective, train, valid, params: GbdtParams, metric) -> GbdtModel:
    x, y = train
    x = _as_matrix(x)
    y = np.asarray(y)
    n, d = x.shape
    if n == 0:
        raise EmptyInputError("empty training set")
    if len(y) != n:
        raise ShapeError(f"{n} rows but {len(y)} targets")
    if objective == REGRESSION:
        y = y.astype(float)
        if not np.all(np.isfinite(y)):
            raise ValueError("regression targets must be finite")
        init = np.array([float(np.mean(y))])
        outputs = [0]
    else:
        y = y.astype(np.int64)
        if np.any((y < 0) | (y >= NUM_CLASSES)):
            raise ValueError("class labels must lie in 0..6")
        freq = np.bincount(y, minlength=NUM_CLASSES) / n
        init = np.log(np.maximum(freq, PRIOR_FLOOR))
        # absent classes keep their prior logit
        outputs = [c for c in range(NUM_CLASSES) if freq[c] > 0]
        if len(outputs) == 1:
            outputs = []

    builder = _TreeBuilder(np.ascontiguousarray(x.T), params)
    raw = np.tile(init, (n, 1))
    has_valid = valid is not None and len(valid[1]) > 0
    if has_valid:
        xv = _as_matrix(valid[0])
        if xv.shape[1] != d:
            raise ShapeError(f"validation matrix has {xv.shape[1]} columns, expected {d}")
        yv = np.asarray(valid[1])
        raw_v = np.tile(init, (len(xv), 1))

    def score():
        pv = raw_v[:, 0] if objective == REGRESSION else softmax(raw_v)
        return _safe_metric(metric, pv, yv)

    model = GbdtModel(objective, d, init, [], params)
    model.train_loss.append(_loss(objective, raw, y))
    best_round, best = 0, -math.inf
    if has_valid:
        best = score()
        model.valid_scores.append(best)
    for rnd in range(params.num_rounds):
        if objective == REGRESSION:
            grads = [(raw[:, 0] - y, np.ones(n))]
        else:
            prob = softmax(raw)
            grads = []
            for c in outputs:
                pc = prob[:, c]
                grads.append((pc - (y == c), pc * (1 - pc)))
        round_trees: list[Tree | None] = [None] * len(init)
        updates = []
        for c, (g, h) in zip(outputs, grads):
            tree, members = builder.build(g, h)
            if tree is None:
                continue
            round_trees[c] = tree
            updates.append((c, tree, members))
        if not updates:
            break
        for c, tree, members in updates:
            for leaf, rows in members.items():
                raw[rows, c] += tree.value[leaf]
            if has_valid:
                raw_v[:, c] += tree.predict(xv)
        model.trees.append(round_trees)
        model.train_loss.append(_loss(objective, raw, y))
        if has_valid:
            s = score()
            model.valid_scores.append(s)
            if s > best:
                best, best_round = s, rnd + 1
            elif rnd + 1 - best_round >= params.early_stopping_rounds:
                break
    if has_valid:
        model.best_iteration = best_round
        model.best_score = best
        model.trees = model.trees[:best_round]
    else:
        model.best_iteration = len(model.trees)
    return model


def train_regressor(train, valid=None, params: GbdtParams | None = None,
                    metric: Callable = custom_regression_metric) -> GbdtModel:
    """Boost on squared error; early-stop on ``metric(pred, truth)`` over ``valid``.

    Without a validation set all ``num_rounds`` rounds are kept.
    """
    return _fit(REGRESSION, train, valid, params or GbdtParams(), metric)


def train_classifier(train, valid=None, params: GbdtParams | None = None,
                     metric: Callable = expression_metric) -> GbdtModel:
    """7-class softmax boosting; ``metric(proba, labels)`` drives early stopping."""
    return _fit(MULTICLASS, train, valid, params or GbdtParams(), metric)


def train(objective: str, train, valid=None, params: GbdtParams | None = None) -> GbdtModel:
    if objective == REGRESSION:
        return train_regressor(train, valid, params)
    if objective == MULTICLASS:
        return train_classifier(train, valid, params)
    raise ValueError(f"unknown objective {objective!r}")


def grid_search(grid: dict, train_set, valid_set, objective: str,
                base: GbdtParams | None = None):
    """Exhaustive search over ``grid``; best = highest validation score, first cell on ties.

    Returns (best params, rows) where each row holds the cell's parameters,
    its validation score and best iteration.
    """
    base = base or GbdtParams()
    keys = [k for k in TUNED_PARAMS if k in grid]
    unknown = set(grid) - set(TUNED_PARAMS)
    if unknown:
        raise ValueError(f"grid keys must be among {TUNED_PARAMS}, got {sorted(unknown)}")
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise ValueError("grid must have at least one value per listed parameter")
    rows = []
    best_params, best_score = None, -math.inf
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = replace(base, **dict(zip(keys, values)))
        model = train(objective, train_set, valid_set, cell)
        score = model.best_score
        rows.append({**dict(zip(keys, values)), "score": score,
                     "best_iteration": model.best_iteration})
        if best_params is None or score > best_score:
            best_params, best_score = cell, score
    return best_params, rows
