"""Three-stage stacking: group sub-models -> single-term -> multi-term -> fusion.

Every stage keeps K fold models (trained without one fold of videos) plus a
refit on all training data. Out-of-fold (OOF) inputs for the next stage are
produced by the *fold chain*: for a row in fold k, every model on the path
that produced its inputs was trained without fold k. Prediction on new data
uses the refit chain.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import gbdt
from .data import NUM_CLASSES, TASKS
from .errors import ConfigError, ManifestError
from .gbdt import GbdtModel, GbdtParams
from .windowing import WindowedDataset

log = logging.getLogger(__name__)


def objective_for(task: str) -> str:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    return gbdt.MULTICLASS if task == "expression" else gbdt.REGRESSION


def output_width(task: str) -> int:
    return NUM_CLASSES if task == "expression" else 1


def model_output(model: GbdtModel, x) -> np.ndarray:
    """Stage output as a 2-D block: (n, 1) values or (n, 7) probabilities."""
    if len(x) == 0:
        return np.empty((0, model.n_outputs))
    out = gbdt.predict(model, x)
    return out[:, None] if out.ndim == 1 else out


@dataclass(frozen=True)
class StackConfig:
    sub_params: GbdtParams = field(default_factory=GbdtParams)
    combiner_params: GbdtParams = field(default_factory=GbdtParams)
    feature_selection: bool = False
    selection_fraction: float = 0.5


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[str, int]   # video_id -> fold

    def folds_of(self, video_ids) -> np.ndarray:
        try:
            return np.array([self.assignment[str(v)] for v in video_ids], dtype=np.int64)
        except KeyError as exc:
            raise ManifestError(f"video {exc.args[0]!r} is not in the fold plan") from None

    def videos_in(self, fold: int) -> list[str]:
        return sorted(v for v, f in self.assignment.items() if f == fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> FoldPlan:
        return cls(int(d["k"]), {str(v): int(f) for v, f in d["assignment"].items()})


def make_fold_plan(ds_or_videos, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle distinct videos with ``seed`` and deal them round-robin into ``k`` folds."""
    if isinstance(ds_or_videos, WindowedDataset):
        videos = ds_or_videos.video_ids
    else:
        videos = ds_or_videos
    videos = sorted({str(v) for v in videos})
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if len(videos) < k:
        raise ConfigError(f"{len(videos)} videos cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(videos))
    return FoldPlan(k, {videos[j]: i % k for i, j in enumerate(perm)})


def _fit(task, x, y, xv, yv, params) -> GbdtModel:
    valid = (xv, yv) if xv is not None and len(yv) else None
    return gbdt.train(objective_for(task), (x, y), valid, params)


def refit_rounds(fold_models: list[GbdtModel]) -> int:
    """Boosting rounds for a refit: the mean early-stopped length of its fold models."""
    return int(np.floor(np.mean([m.best_iteration for m in fold_models]) + 0.5))


def _refit(task, x, y, params, fold_models) -> GbdtModel:
    """Refit on all rows for the fold models' mean length, without early stopping.

    Early-stopping the refit separately lets it stop at a very different round than
    the fold chains whose outputs trained the next stage, which shifts that stage's
    inputs between training and prediction.
    """
    return _fit(task, x, y, None, None, replace(params, num_rounds=refit_rounds(fold_models)))


@dataclass
class GroupModel:
    """One feature group's sub-model for one term, with its selected columns."""

    selected: np.ndarray
    model: GbdtModel

    def output(self, x) -> np.ndarray:
        return model_output(self.model, x[:, self.selected])


def _fit_group(task, x, y, xv, yv, cfg: StackConfig, folds=None) -> GroupModel:
    """Group sub-model; with ``folds`` (the fold sub-models) it is a refit of their length."""
    selected = np.arange(x.shape[1])
    if cfg.feature_selection:
        probe = _fit(task, x, y, xv, yv, cfg.sub_params)
        selected = gbdt.select_top_features(gbdt.feature_importance(probe),
                                            cfg.selection_fraction)
    if folds is not None:
        return GroupModel(selected, _refit(task, x[:, selected], y, cfg.sub_params,
                                           [f.model for f in folds]))
    xv_sel = xv[:, selected] if xv is not None else None
    return GroupModel(selected, _fit(task, x[:, selected], y, xv_sel, yv, cfg.sub_params))


@dataclass
class SingleTermModel:
    task: str
    term: str
    groups: list[str]
    sub_models: dict[str, GroupModel]
    combiner: GbdtModel
    fold_sub_models: list[dict[str, GroupModel]]
    fold_combiners: list[GbdtModel]
    fold_videos: list[list[str]] = field(default_factory=list)  # seen by each fold chain

    @property
    def width(self) -> int:
        return output_width(self.task)

    @property
    def combiner_width(self) -> int:
        return len(self.groups) * self.width

    def sub_outputs(self, ds: WindowedDataset, fold: int | None = None) -> np.ndarray:
        subs = self.sub_models if fold is None else self.fold_sub_models[fold]
        _check_schema(ds, self.term, self.groups)
        return np.hstack([subs[g].output(ds.features[self.term][g]) for g in self.groups])

    def output(self, ds: WindowedDataset, fold: int | None = None) -> np.ndarray:
        comb = self.combiner if fold is None else self.fold_combiners[fold]
        return model_output(comb, self.sub_outputs(ds, fold))


@dataclass
class MultiTermModel:
    task: str
    terms: list[str]
    term_models: dict[str, SingleTermModel]
    combiner: GbdtModel
    fold_combiners: list[GbdtModel]
    fold_videos: list[list[str]] = field(default_factory=list)

    @property
    def combiner_width(self) -> int:
        return len(self.terms) * output_width(self.task)

    def term_outputs(self, ds, fold=None) -> np.ndarray:
        return np.hstack([self.term_models[t].output(ds, fold) for t in self.terms])

    def output(self, ds: WindowedDataset, fold: int | None = None) -> np.ndarray:
        comb = self.combiner if fold is None else self.fold_combiners[fold]
        return model_output(comb, self.term_outputs(ds, fold))


@dataclass
class FusionModel:
    task: str
    target: MultiTermModel
    others: dict[str, MultiTermModel]
    combiner: GbdtModel

    @property
    def input_names(self) -> list[str]:
        names = []
        for t in self.target.terms:
            names += _block_names(f"{self.task}.{t}", self.task)
        for task in self.others:
            names += _block_names(f"{task}.multi_term", task)
        return names

    @property
    def combiner_width(self) -> int:
        return len(self.input_names)

    def inputs(self, ds: WindowedDataset, fold: int | None = None) -> np.ndarray:
        blocks = [self.target.term_outputs(ds, fold)]
        blocks += [m.output(ds, fold) for m in self.others.values()]
        return np.hstack(blocks)

    def output(self, ds: WindowedDataset) -> np.ndarray:
        return model_output(self.combiner, self.inputs(ds))


def _block_names(prefix, task):
    if task == "expression":
        return [f"{prefix}.p{c}" for c in range(NUM_CLASSES)]
    return [prefix]


def _check_schema(ds: WindowedDataset, term: str, groups) -> None:
    if term not in ds.features:
        raise ManifestError(f"dataset has no term {term!r}")
    for g in groups:
        if g not in ds.features[term]:
            raise ManifestError(f"dataset has no group {g!r} for term {term!r}")


@dataclass
class OofAudit:
    """Fold bookkeeping for one stacking stage: which fold model produced each OOF row."""

    stage: str
    row_videos: np.ndarray
    producer: np.ndarray                  # fold id of the model that produced each row
    trained_on: list[list[str]]           # videos seen by each fold model

    def violations(self) -> int:
        seen = [set(v) for v in self.trained_on]
        return sum(str(v) in seen[p] for v, p in zip(self.row_videos, self.producer))


@dataclass
class StageResult:
    """A trained stage plus its OOF outputs on the training rows."""

    model: object
    oof: np.ndarray
    audits: list[OofAudit] = field(default_factory=list)


def _merge_videos(*per_fold):
    """Union of per-fold video lists, fold by fold."""
    per_fold = [p for p in per_fold if p]
    k = len(per_fold[0])
    return [sorted(set().union(*(p[i] for p in per_fold))) for i in range(k)]


def _fit_combiner_chain(task, z, y, video_ids, folds, plan, valid_inputs, yv, params,
                        stage, upstream):
    """Fold combiners + refit combiner.

    Returns (refit, fold models, OOF outputs, audit, videos seen per fold chain);
    ``upstream`` lists the videos seen by each fold's input producers.
    """
    fold_models = []
    oof = np.zeros((len(y), output_width(task)))
    producer = np.full(len(y), -1, dtype=np.int64)
    seen = []
    for k in range(plan.k):
        tr, te = np.flatnonzero(folds != k), np.flatnonzero(folds == k)
        zv = valid_inputs(k) if valid_inputs else None
        m = _fit(task, z[tr], y[tr], zv, yv, params)
        fold_models.append(m)
        oof[te] = model_output(m, z[te])
        producer[te] = k
        seen.append(sorted(set(upstream[k]) | set(map(str, video_ids[tr]))))
    refit = _refit(task, z, y, params, fold_models)
    # the OOF rows of this stage came from fold chains that include this combiner
    audit = OofAudit(stage, np.asarray(video_ids).copy(), producer, seen)
    return refit, fold_models, oof, audit, seen


@dataclass
class GroupStage:
    """Per-group sub-models of one term: refits, fold models and OOF outputs."""

    task: str
    term: str
    groups: list[str]
    sub_models: dict[str, GroupModel]
    fold_sub_models: list[dict[str, GroupModel]]
    oof: np.ndarray
    audit: OofAudit
    fold_videos: list[list[str]]


def train_group_models(ds: WindowedDataset, term: str, task: str, cfg: StackConfig,
                       plan: FoldPlan, valid: WindowedDataset | None = None,
                       groups=None) -> GroupStage:
    """One sub-model per feature group on the term's features, against the term's label."""
    if term not in ds.terms:
        raise ConfigError(f"dataset has no term {term!r}")
    groups = list(groups if groups is not None else ds.groups)
    usable = [g for g in groups if g in ds.features[term]]
    for g in groups:
        if g not in usable:
            log.warning("group %s missing from term %s; skipped", g, term)
    if not usable:
        raise ConfigError(f"no usable feature groups for term {term!r}")
    y = ds.label(task, term)
    yv = valid.label(task, term) if valid is not None else None
    folds = plan.folds_of(ds.video_ids)
    fold_subs: list[dict[str, GroupModel]] = [{} for _ in range(plan.k)]
    subs: dict[str, GroupModel] = {}
    blocks = []
    producer = np.full(len(y), -1, dtype=np.int64)
    seen: list[set] = [set() for _ in range(plan.k)]
    for g in usable:
        x = ds.features[term][g]
        xv = valid.features[term][g] if valid is not None else None
        block = np.zeros((len(y), output_width(task)))
        for k in range(plan.k):
            tr, te = np.flatnonzero(folds != k), np.flatnonzero(folds == k)
            gm = _fit_group(task, x[tr], y[tr], xv, yv, cfg)
            seen[k].update(map(str, ds.video_ids[tr]))
            fold_subs[k][g] = gm
            block[te] = gm.output(x[te])
            producer[te] = k
        subs[g] = _fit_group(task, x, y, xv, yv, cfg, [fold_subs[k][g] for k in range(plan.k)])
        blocks.append(block)
    fold_videos = [sorted(s) for s in seen]
    audit = OofAudit(f"{task}.{term}.sub", ds.video_ids.copy(), producer, fold_videos)
    return GroupStage(task, term, usable, subs, fold_subs, np.hstack(blocks), audit,
                      fold_videos)


def train_single_term(ds: WindowedDataset, term: str, task: str, cfg: StackConfig,
                      plan: FoldPlan, valid: WindowedDataset | None = None,
                      groups=None) -> StageResult:
    """Per-group sub-models, then a combiner stacked on their OOF outputs.

    Sub-models and combiner are supervised by the term's own window label.
    """
    gs = train_group_models(ds, term, task, cfg, plan, valid, groups)
    return train_single_term_from(gs, ds, cfg, plan, valid)


def train_single_term_from(gs: GroupStage, ds: WindowedDataset, cfg: StackConfig,
                           plan: FoldPlan, valid: WindowedDataset | None = None) -> StageResult:
    """Combiner stage on top of already trained group sub-models."""
    task, term = gs.task, gs.term
    y = ds.label(task, term)
    yv = valid.label(task, term) if valid is not None else None
    folds = plan.folds_of(ds.video_ids)

    def valid_inputs(fold):
        s = gs.sub_models if fold is None else gs.fold_sub_models[fold]
        return np.hstack([s[g].output(valid.features[term][g]) for g in gs.groups])

    combiner, fold_combiners, oof, audit, seen = _fit_combiner_chain(
        task, gs.oof, y, ds.video_ids, folds, plan,
        valid_inputs if valid is not None else None, yv, cfg.combiner_params,
        f"{task}.{term}.combiner", gs.fold_videos)
    model = SingleTermModel(task, term, gs.groups, gs.sub_models, combiner,
                            gs.fold_sub_models, fold_combiners, seen)
    return StageResult(model, oof, [gs.audit, audit])


def train_multi_term(ds: WindowedDataset, task: str, term_results: dict[str, StageResult],
                     cfg: StackConfig, plan: FoldPlan,
                     valid: WindowedDataset | None = None) -> StageResult:
    """Combiner over the term models' OOF outputs, supervised by the short-term label."""
    terms = [t for t in ds.terms if t in term_results]
    missing = [t for t in ds.terms if t not in term_results]
    if missing:
        raise ConfigError(f"missing single-term model(s) for {task}: {missing}")
    term_models = {t: term_results[t].model for t in terms}
    for t, m in term_models.items():
        if m.task != task:
            raise ConfigError(f"term model {t} is for {m.task}, not {task}")
    z = np.hstack([term_results[t].oof for t in terms])
    y = ds.label(task, "short")
    yv = valid.label(task, "short") if valid is not None else None
    folds = plan.folds_of(ds.video_ids)

    def valid_inputs(fold):
        return np.hstack([term_models[t].output(valid, fold) for t in terms])

    upstream = _merge_videos(*(m.fold_videos for m in term_models.values()))
    combiner, fold_combiners, oof, audit, seen = _fit_combiner_chain(
        task, z, y, ds.video_ids, folds, plan,
        valid_inputs if valid is not None else None, yv, cfg.combiner_params,
        f"{task}.multi_term", upstream)
    model = MultiTermModel(task, terms, term_models, combiner, fold_combiners, seen)
    return StageResult(model, oof, [audit])


def other_task_oof(model: MultiTermModel, ds: WindowedDataset, plan: FoldPlan) -> np.ndarray:
    """Outputs of another task's multi-term fold chains on ``ds``'s rows, leakage-free."""
    folds = plan.folds_of(ds.video_ids)
    out = np.zeros((len(ds), output_width(model.task)))
    for k in range(plan.k):
        te = np.flatnonzero(folds == k)
        if len(te):
            out[te] = model.output(ds.subset(te), k)
    return out


def train_fusion(task: str, multi_results: dict[str, StageResult], ds: WindowedDataset,
                 cfg: StackConfig, plan: FoldPlan,
                 valid: WindowedDataset | None = None) -> StageResult:
    """Final combiner on the target's per-term OOF outputs plus other tasks' multi-term outputs."""
    missing = [t for t in TASKS if t not in multi_results]
    if missing:
        raise ConfigError(f"fusion needs multi-term models for every task; missing {missing}")
    target = multi_results[task].model
    others = {t: multi_results[t].model for t in TASKS if t != task}
    terms = target.terms
    # the target's term OOF outputs were computed on this dataset's rows
    target_oof = np.hstack([_term_oof(target, t, ds, plan) for t in terms])
    z = np.hstack([target_oof] + [other_task_oof(m, ds, plan) for m in others.values()])
    y = ds.label(task, "short")
    yv, zv = None, None
    if valid is not None:
        yv = valid.label(task, "short")
        zv = np.hstack([target.term_outputs(valid)] + [m.output(valid) for m in others.values()])
    combiner = _fit(task, z, y, zv, yv, cfg.combiner_params)
    folds = plan.folds_of(ds.video_ids)
    # fusion inputs for a fold-k row come from every task's fold-k chain
    seen = _merge_videos(target.fold_videos, *(m.fold_videos for m in others.values()))
    audit = OofAudit(f"{task}.fusion_inputs", ds.video_ids.copy(), folds.copy(), seen)
    return StageResult(FusionModel(task, target, others, combiner), model_output(combiner, z),
                       [audit])


def _term_oof(mt: MultiTermModel, term: str, ds: WindowedDataset, plan: FoldPlan) -> np.ndarray:
    folds = plan.folds_of(ds.video_ids)
    out = np.zeros((len(ds), output_width(mt.task)))
    for k in range(plan.k):
        te = np.flatnonzero(folds == k)
        if len(te):
            out[te] = mt.term_models[term].output(ds.subset(te), k)
    return out


def predict_pipeline(model, ds: WindowedDataset):
    """Refit-chain forward pass.

    Regression models return (n,) values; expression models return
    (argmax classes, (n, 7) probabilities).
    """
    if isinstance(model, GroupModel):
        raise TypeError("use GroupModel.output for sub-models")
    if len(ds) == 0:
        out = np.empty((0, output_width(model.task)))
    else:
        out = model.output(ds)
    if model.task == "expression":
        return np.argmax(out, axis=1), out
    return out[:, 0]
