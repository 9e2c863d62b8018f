"""On-disk model bundles.

A bundle is a directory::

    manifest.json          schema, terms, groups, seeds, stage wiring, selections
    fold_plan.json
    standardizer.json
    pca_<group>.json
    models/<name>.json     one document per GbdtModel (refit and fold models)
    stages/<name>.json     per-stage wiring, OOF outputs and fold audits

Every float is written with ``repr`` precision by the JSON encoder, so a
reloaded model predicts bit-identically.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ensemble import (FoldPlan, FusionModel, GroupModel, GroupStage, MultiTermModel, OofAudit,
                       SingleTermModel, StageResult)
from .errors import ManifestError, StageDependencyError
from .gbdt import GbdtModel


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path, what: str = "artifact"):
    path = Path(path)
    if not path.is_file():
        raise StageDependencyError(f"missing {what}: {path}")
    with open(path) as fh:
        return json.load(fh)


def _audit_to_dict(a: OofAudit) -> dict:
    return {"stage": a.stage, "row_videos": [str(v) for v in a.row_videos],
            "producer": a.producer.tolist(), "trained_on": a.trained_on}


def _audit_from_dict(d: dict) -> OofAudit:
    return OofAudit(d["stage"], np.array(d["row_videos"], dtype=object),
                    np.asarray(d["producer"], dtype=np.int64), d["trained_on"])


def _oof_from(d) -> np.ndarray:
    rows = d["oof"]
    return np.asarray(rows, dtype=float).reshape(len(rows), d["oof_width"])


class Bundle:
    def __init__(self, root):
        self.root = Path(root)

    # models -------------------------------------------------------------
    def save_model(self, name: str, model: GbdtModel) -> str:
        rel = f"models/{name}.json"
        write_json(self.root / rel, model.to_dict())
        return rel

    def load_model(self, rel: str) -> GbdtModel:
        return GbdtModel.from_dict(read_json(self.root / rel, "model document"))

    def stage_path(self, name: str) -> Path:
        return self.root / "stages" / f"{name}.json"

    def has_stage(self, name: str) -> bool:
        return self.stage_path(name).is_file()

    def _read_stage(self, name: str, digest: str | None) -> dict:
        doc = read_json(self.stage_path(name), f"stage {name!r}")
        if digest is not None and doc.get("train_digest") != digest:
            raise StageDependencyError(
                f"stage {name!r} in {self.stage_path(name)} was trained on different data; "
                "retrain the upstream stages")
        return doc

    # group sub-models ---------------------------------------------------
    @staticmethod
    def sub_name(task, term):
        return f"{task}.{term}.sub"

    def _save_group(self, prefix, gm: GroupModel) -> dict:
        return {"model": self.save_model(prefix, gm.model), "selected": gm.selected.tolist()}

    def _load_group(self, d) -> GroupModel:
        return GroupModel(np.asarray(d["selected"], dtype=np.int64), self.load_model(d["model"]))

    def save_group_stage(self, gs: GroupStage, digest: str) -> None:
        name = self.sub_name(gs.task, gs.term)
        doc = {
            "kind": "subgroup", "task": gs.task, "term": gs.term, "groups": gs.groups,
            "refit": {g: self._save_group(f"{name}.{g}.refit", gs.sub_models[g])
                      for g in gs.groups},
            "folds": [{g: self._save_group(f"{name}.{g}.fold{k}", subs[g]) for g in gs.groups}
                      for k, subs in enumerate(gs.fold_sub_models)],
            "oof": gs.oof.tolist(), "oof_width": gs.oof.shape[1],
            "fold_videos": gs.fold_videos, "audit": _audit_to_dict(gs.audit),
            "train_digest": digest,
        }
        write_json(self.stage_path(name), doc)

    def load_group_stage(self, task, term, digest=None) -> GroupStage:
        d = self._read_stage(self.sub_name(task, term), digest)
        return GroupStage(
            d["task"], d["term"], list(d["groups"]),
            {g: self._load_group(v) for g, v in d["refit"].items()},
            [{g: self._load_group(v) for g, v in fold.items()} for fold in d["folds"]],
            _oof_from(d), _audit_from_dict(d["audit"]), d["fold_videos"])

    # single-term ----------------------------------------------------------
    @staticmethod
    def single_name(task, term):
        return f"{task}.{term}.single"

    def save_single_term(self, res: StageResult, digest: str) -> None:
        m: SingleTermModel = res.model
        name = self.single_name(m.task, m.term)
        doc = {
            "kind": "single_term", "task": m.task, "term": m.term,
            "sub_stage": self.sub_name(m.task, m.term),
            "combiner": self.save_model(f"{name}.combiner.refit", m.combiner),
            "fold_combiners": [self.save_model(f"{name}.combiner.fold{k}", c)
                               for k, c in enumerate(m.fold_combiners)],
            "fold_videos": m.fold_videos, "oof": res.oof.tolist(),
            "oof_width": res.oof.shape[1], "audits": [_audit_to_dict(a) for a in res.audits],
            "train_digest": digest,
        }
        write_json(self.stage_path(name), doc)

    def load_single_term(self, task, term, digest=None) -> StageResult:
        d = self._read_stage(self.single_name(task, term), digest)
        gs = self.load_group_stage(task, term, digest)
        model = SingleTermModel(task, term, gs.groups, gs.sub_models,
                                self.load_model(d["combiner"]), gs.fold_sub_models,
                                [self.load_model(r) for r in d["fold_combiners"]],
                                d["fold_videos"])
        return StageResult(model, _oof_from(d), [_audit_from_dict(a) for a in d["audits"]])

    # multi-term -----------------------------------------------------------
    @staticmethod
    def multi_name(task):
        return f"{task}.multi_term"

    def save_multi_term(self, res: StageResult, digest: str) -> None:
        m: MultiTermModel = res.model
        name = self.multi_name(m.task)
        doc = {
            "kind": "multi_term", "task": m.task, "terms": m.terms,
            "term_stages": {t: self.single_name(m.task, t) for t in m.terms},
            "combiner": self.save_model(f"{name}.combiner.refit", m.combiner),
            "fold_combiners": [self.save_model(f"{name}.combiner.fold{k}", c)
                               for k, c in enumerate(m.fold_combiners)],
            "fold_videos": m.fold_videos, "oof": res.oof.tolist(),
            "oof_width": res.oof.shape[1], "audits": [_audit_to_dict(a) for a in res.audits],
            "train_digest": digest,
        }
        write_json(self.stage_path(name), doc)

    def load_multi_term(self, task, digest=None) -> StageResult:
        d = self._read_stage(self.multi_name(task), digest)
        terms = list(d["terms"])
        term_models = {t: self.load_single_term(task, t, digest).model for t in terms}
        model = MultiTermModel(task, terms, term_models, self.load_model(d["combiner"]),
                               [self.load_model(r) for r in d["fold_combiners"]],
                               d["fold_videos"])
        return StageResult(model, _oof_from(d), [_audit_from_dict(a) for a in d["audits"]])

    # fusion ---------------------------------------------------------------
    @staticmethod
    def fusion_name(task):
        return f"{task}.fusion"

    def save_fusion(self, res: StageResult, digest: str) -> None:
        m: FusionModel = res.model
        name = self.fusion_name(m.task)
        doc = {
            "kind": "fusion", "task": m.task, "target_stage": self.multi_name(m.task),
            "other_tasks": list(m.others),
            "other_stages": [self.multi_name(t) for t in m.others],
            "input_names": m.input_names,
            "combiner": self.save_model(f"{name}.combiner", m.combiner),
            "audits": [_audit_to_dict(a) for a in res.audits], "train_digest": digest,
        }
        write_json(self.stage_path(name), doc)

    def load_fusion(self, task, digest=None) -> FusionModel:
        d = self._read_stage(self.fusion_name(task), digest)
        target = self.load_multi_term(task, digest).model
        others = {t: self.load_multi_term(t, digest).model for t in d["other_tasks"]}
        model = FusionModel(task, target, others, self.load_model(d["combiner"]))
        if model.input_names != d["input_names"]:
            raise ManifestError(f"fusion input order for {task} does not match the bundle")
        return model

    def load_audits(self) -> list[OofAudit]:
        """Every stored fold audit, in stage-name order."""
        out = []
        for path in sorted((self.root / "stages").glob("*.json")):
            doc = read_json(path)
            if "audit" in doc:
                out.append(_audit_from_dict(doc["audit"]))
            out += [_audit_from_dict(a) for a in doc.get("audits", [])]
        return out

    # plan -----------------------------------------------------------------
    def save_fold_plan(self, plan: FoldPlan) -> None:
        write_json(self.root / "fold_plan.json", plan.to_dict())

    def load_fold_plan(self) -> FoldPlan:
        return FoldPlan.from_dict(read_json(self.root / "fold_plan.json", "fold plan"))
