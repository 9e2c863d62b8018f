"""Challenge scores (CCC, VA score, expression score) and the training metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import NUM_CLASSES
from .errors import ShapeError, UndefinedMetricError

F1_WEIGHT = 0.67
ACCURACY_WEIGHT = 0.33


def _pair(x, y, min_len):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if len(x) < min_len:
        raise ShapeError(f"need at least {min_len} values, got {len(x)}")
    return x, y


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population (1/N) moments."""
    x, y = _pair(x, y, 2)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    sxy = np.mean(dx * dy)
    denom = vx + vy + (mx - my) ** 2
    if denom == 0:
        raise UndefinedMetricError("CCC undefined: both inputs constant with equal means")
    return float(2 * sxy / denom)


def mse(pred, truth) -> float:
    pred, truth = _pair(pred, truth, 1)
    return float(np.mean((pred - truth) ** 2))


def va_score(ccc_v: float, ccc_a: float) -> float:
    return (ccc_v + ccc_a) / 2


def custom_regression_metric(pred, truth) -> float:
    """2 * CCC - MSE; higher is better."""
    return 2 * ccc(truth, pred) - mse(pred, truth)


def confusion_matrix(pred, truth, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """``cm[t, p]`` counts samples with truth t predicted as p."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.bincount(truth * n_classes + pred, minlength=n_classes ** 2).reshape(
        n_classes, n_classes)


def per_class_f1(pred, truth, n_classes: int = NUM_CLASSES):
    """Per-class precision, recall, F1 and a mask of classes seen in truth or prediction."""
    cm = confusion_matrix(pred, truth, n_classes)
    tp = np.diag(cm).astype(float)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_n > 0, tp / pred_n, 0.0)
        recall = np.where(true_n > 0, tp / true_n, 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1, (pred_n + true_n) > 0


def macro_f1(pred, truth, exclude_absent: bool = True) -> float:
    _, _, f1, present = per_class_f1(pred, truth)
    if exclude_absent:
        return float(f1[present].mean())
    return float(f1.mean())


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean(pred == truth))


def combine_expression(f1: float, acc: float) -> float:
    return F1_WEIGHT * f1 + ACCURACY_WEIGHT * acc


def expression_score(pred, truth, exclude_absent: bool = True) -> dict:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if len(pred) == 0:
        raise ShapeError("need at least 1 sample")
    f1 = macro_f1(pred, truth, exclude_absent)
    acc = accuracy(pred, truth)
    return {"macro_f1": f1, "accuracy": acc, "expr_score": combine_expression(f1, acc)}


def expression_metric(proba, truth) -> float:
    """Expression score of argmax predictions; the classifier's early-stopping metric."""
    return expression_score(np.argmax(proba, axis=1), truth)["expr_score"]


@dataclass
class EvalReport:
    ccc_valence: float | None = None
    ccc_arousal: float | None = None
    va_score: float | None = None
    macro_f1: float | None = None
    accuracy: float | None = None
    expr_score: float | None = None
    n_valence: int = 0
    n_arousal: int = 0
    n_expression: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            lines.append(f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines)


def evaluate(predictions: dict, truth: dict, exclude_absent: bool = True) -> EvalReport:
    """Build a report from per-task predictions and truths (any subset of tasks)."""
    rep = EvalReport()
    if "valence" in predictions:
        rep.ccc_valence = ccc(truth["valence"], predictions["valence"])
        rep.n_valence = len(truth["valence"])
    if "arousal" in predictions:
        rep.ccc_arousal = ccc(truth["arousal"], predictions["arousal"])
        rep.n_arousal = len(truth["arousal"])
    if rep.ccc_valence is not None and rep.ccc_arousal is not None:
        rep.va_score = va_score(rep.ccc_valence, rep.ccc_arousal)
    if "expression" in predictions:
        s = expression_score(predictions["expression"], truth["expression"], exclude_absent)
        rep.macro_f1, rep.accuracy, rep.expr_score = s["macro_f1"], s["accuracy"], s["expr_score"]
        rep.n_expression = len(truth["expression"])
    return rep
