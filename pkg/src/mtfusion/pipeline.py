"""Stage orchestration behind the CLI: extract, balance, train, predict, evaluate, gridsearch.

Output layout under ``cfg.output``::

    preprocess/     standardizer.json, pca_<group>.json
    windowed/       {va,expr}_{train,valid}.csv (+ .schema.json sidecars)
    balanced/       {va,expr}_train_balanced.csv, balance_report.json
    bundle/         see ``bundle.py``
    predictions/    {va,expr}_<split>[_<stage>].csv
    reports/        eval_<split>[_<stage>].{txt,json}
    gridsearch/     <task>_<term>[_<group>].csv
    runs/           <command>.json run manifests and <command>.log
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from pathlib import Path

import numpy as np

from . import balancing, ensemble, gbdt, metrics
from .bundle import Bundle, read_json, write_json
from .config import PipelineConfig, describe
from .data import (TASKS, FeatureGroupSpec, FrameSequence, StandardizerStats, fit_standardizer,
                   fmt_float, load_labels, load_video, standardize)
from .decomposition import fit_pca, transform_pca
from .errors import ConfigError, DataError, ManifestError, StageDependencyError
from .windowing import (WindowedDataset, extract_dataset, load_windowed, save_windowed,
                        schema_path)

log = logging.getLogger(__name__)

FAMILIES = {"va": ("valence", "arousal"), "expr": ("expression",)}
SPLITS = ("train", "valid")
TRAIN_STAGES = ("subgroup", "single-term", "multi-term", "fusion")
PCA_GROUPS = ("deep",)


def family_of(task: str) -> str:
    return "expr" if task == "expression" else "va"


def family_tasks(cfg: PipelineConfig) -> dict[str, tuple[str, ...]]:
    """Families needed by the configured tasks, each with its configured tasks."""
    out = {}
    for fam, tasks in FAMILIES.items():
        sel = tuple(t for t in tasks if t in cfg.tasks)
        if sel:
            out[fam] = sel
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Layout:
    def __init__(self, cfg: PipelineConfig):
        self.root = cfg.resolve(cfg.output)
        self.corpus = cfg.resolve(cfg.corpus)

    def standardizer(self):
        return self.root / "preprocess" / "standardizer.json"

    def pca(self, group):
        return self.root / "preprocess" / f"pca_{group}.json"

    def windowed(self, fam, split):
        return self.root / "windowed" / f"{fam}_{split}.csv"

    def balanced(self, fam):
        return self.root / "balanced" / f"{fam}_train_balanced.csv"

    def balance_report(self):
        return self.root / "balanced" / "balance_report.json"

    def bundle(self):
        return self.root / "bundle"

    def predictions(self, fam, split, stage="auto"):
        tag = "" if stage == "auto" else f"_{stage}"
        return self.root / "predictions" / f"{fam}_{split}{tag}.csv"

    def report(self, split, stage="auto"):
        tag = "" if stage == "auto" else f"_{stage}"
        return self.root / "reports" / f"eval_{split}{tag}"

    def gridsearch(self, task, term, group=None):
        tag = f"_{group}" if group else ""
        return self.root / "gridsearch" / f"{task}_{term}{tag}.csv"

    def run(self, command):
        return self.root / "runs" / f"{command}.json"


def require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise StageDependencyError(f"missing upstream artifact: {path}")
    return path


def write_run_manifest(cfg: PipelineConfig, command: str, inputs, outputs, extra=None) -> Path:
    """Record config hash, seeds and sha256 digests of every input and output file."""
    lay = Layout(cfg)
    doc = {
        "command": command,
        "config_digest": cfg.digest(),
        "seeds": {"seed": cfg.seed, "balance": cfg.balance.seed,
                  "learner": cfg.learner.seed, "combiner": cfg.combiner.seed},
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "outputs": {str(p): sha256_file(p) for p in sorted(map(str, outputs))},
    }
    if extra:
        doc.update(extra)
    path = lay.run(command)
    write_json(path, doc)
    with open(path.with_suffix(".log"), "w") as fh:
        fh.write(f"command={command}\n{describe(cfg)}\n")
    return path


# corpus ---------------------------------------------------------------------

def load_corpus_manifest(cfg: PipelineConfig) -> dict:
    path = Layout(cfg).corpus / "corpus.json"
    doc = read_json(path, "corpus manifest")
    for key in ("videos",):
        if key not in doc:
            raise ManifestError(f"{path}: missing key {key!r}")
    if cfg.fps is None and "fps" not in doc:
        raise ManifestError(f"{path}: no fps given in corpus or config")
    return doc


def corpus_schema(cfg: PipelineConfig, doc: dict) -> list[FeatureGroupSpec]:
    if cfg.schema is not None:
        return list(cfg.schema)
    if "schema" not in doc:
        raise ManifestError("corpus manifest has no schema and the config gives none")
    return [FeatureGroupSpec(g["name"], int(g["dim"]), tuple(g.get("columns") or ()),
                             g.get("source", "")) for g in doc["schema"]]


def read_corpus(cfg: PipelineConfig):
    """(schema, fps, [(sequence with available labels, split)]) in video id order."""
    lay = Layout(cfg)
    doc = load_corpus_manifest(cfg)
    schema = corpus_schema(cfg, doc)
    fps = float(cfg.fps if cfg.fps is not None else doc["fps"])
    sources = list(dict.fromkeys(g.source for g in schema))
    out = []
    for entry in sorted(doc["videos"], key=lambda v: v["id"]):
        vid, split = str(entry["id"]), entry.get("split", "train")
        if split not in SPLITS:
            raise ManifestError(f"video {vid}: unknown split {split!r}")
        vdir = lay.corpus / vid
        seq = load_video({s: require(vdir / f"{s}.csv") for s in sources}, schema, fps, vid)
        for task in TASKS:
            path = vdir / f"{task}.csv"
            if task in cfg.tasks and path.is_file():
                seq = seq.with_labels(load_labels(path, task))
        out.append((seq, split))
    return schema, fps, out


def fit_preprocessing(cfg: PipelineConfig, train: list[FrameSequence], schema):
    stats = fit_standardizer(train)
    pcas = {}
    for g in schema:
        if g.name not in PCA_GROUPS:
            continue
        k = cfg.deep_dims
        frames = np.vstack([standardize(s, stats).features[g.name][s.frame_ok] for s in train])
        limit = min(frames.shape[0] - 1, frames.shape[1])
        if not 1 <= k <= limit:
            raise ConfigError(f"PCA target {k} for group {g.name!r} must lie in [1, {limit}] "
                              f"({frames.shape[1]} input columns, {frames.shape[0]} frames)")
        pcas[g.name] = fit_pca(frames, k, cfg.pca_solver)
    return stats, pcas


def preprocess(seq: FrameSequence, stats: StandardizerStats, pcas: dict) -> FrameSequence:
    seq = standardize(seq, stats)
    if not pcas:
        return seq
    feats = dict(seq.features)
    for g, model in pcas.items():
        feats[g] = transform_pca(model, feats[g])
    return seq.with_features(feats)


def group_columns(schema, pcas) -> dict[str, tuple[str, ...]]:
    cols = {g.name: g.columns for g in schema}
    for g, model in pcas.items():
        cols[g] = tuple(f"pc{i}" for i in range(model.k))
    return cols


# commands -------------------------------------------------------------------

def run_extract(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg)
    schema, fps, videos = read_corpus(cfg)
    train = [s for s, split in videos if split == "train"]
    if not train:
        raise DataError("corpus has no training videos")
    stats, pcas = fit_preprocessing(cfg, train, schema)
    write_json(lay.standardizer(), stats.to_dict())
    for g, model in pcas.items():
        write_json(lay.pca(g), model.to_dict())
    wcfg = cfg.window_config(fps)
    cols = group_columns(schema, pcas)
    ready = [(preprocess(s, stats, pcas), split) for s, split in videos]
    outputs = [lay.standardizer()] + [lay.pca(g) for g in pcas]
    counts = {}
    for fam, tasks in family_tasks(cfg).items():
        for split in SPLITS:
            seqs = [s for s, sp in ready if sp == split and all(t in s.labels for t in tasks)]
            ds = extract_dataset(seqs, wcfg, tasks, cols)
            path = lay.windowed(fam, split)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_windowed(ds, path)
            outputs.append(path)
            counts[f"{fam}_{split}"] = {"videos": len(seqs), "samples": len(ds)}
            log.info("%s %s: %d videos, %d samples", fam, split, len(seqs), len(ds))
    inputs = sorted(p for p in lay.corpus.rglob("*.csv")) + [lay.corpus / "corpus.json"]
    write_run_manifest(cfg, "extract", inputs, outputs, {"counts": counts})
    return counts


def run_balance(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg)
    grid = balancing.VaGrid(frozenset(cfg.balance.center_regions))
    report, inputs, outputs = {}, [], []
    for fam, tasks in family_tasks(cfg).items():
        src = require(lay.windowed(fam, "train"))
        ds = load_windowed(src)
        if fam == "expr":
            out = balancing.balance_expression(ds, cfg.balance.seed)
            before, after = balancing.expression_counts(ds), balancing.expression_counts(out)
        else:
            if tasks != FAMILIES["va"]:
                raise ConfigError("VA balancing needs both valence and arousal tasks")
            out = balancing.balance_va(ds, grid, cfg.balance.seed)
            before, after = balancing.region_counts(ds), balancing.region_counts(out)
        dst = lay.balanced(fam)
        dst.parent.mkdir(parents=True, exist_ok=True)
        save_windowed(out, dst)
        report[fam] = {"before": {str(k): v for k, v in before.items()},
                       "after": {str(k): v for k, v in after.items()},
                       "total_before": len(ds), "total_after": len(out)}
        if fam == "va":
            report[fam]["center_regions"] = sorted(grid.center_region)
        inputs.append(src)
        outputs.append(dst)
    write_json(lay.balance_report(), report)
    outputs.append(lay.balance_report())
    write_run_manifest(cfg, "balance", inputs, outputs)
    return report


def stack_config(cfg: PipelineConfig) -> ensemble.StackConfig:
    return ensemble.StackConfig(cfg.learner, cfg.combiner, cfg.feature_selection.enabled,
                                cfg.feature_selection.fraction)


def training_inputs(cfg: PipelineConfig) -> dict[str, Path]:
    """Windowed files feeding training, keyed ``<family>_<split>``."""
    lay = Layout(cfg)
    out = {}
    for fam in family_tasks(cfg):
        train = lay.balanced(fam) if cfg.balance.enabled else lay.windowed(fam, "train")
        out[f"{fam}_train"] = require(train)
        out[f"{fam}_valid"] = require(lay.windowed(fam, "valid"))
    return out


def _train_digest(cfg: PipelineConfig, files: dict[str, Path]) -> str:
    d = cfg.to_dict()
    relevant = {k: d[k] for k in ("tasks", "learner", "combiner", "feature_selection", "folds",
                                  "seed", "balance")}
    h = hashlib.sha256(json.dumps(relevant, sort_keys=True).encode())
    for key in sorted(files):
        h.update(key.encode())
        h.update(sha256_file(files[key]).encode())
    return h.hexdigest()


def _load_family_data(files):
    data = {}
    for key, path in files.items():
        fam, split = key.split("_")
        ds = load_windowed(path)
        data.setdefault(fam, {})[split] = ds if len(ds) or split == "train" else None
    return data


def _copy_preprocessing(lay: Layout, bundle_dir: Path) -> list[str]:
    names = []
    for path in sorted((lay.root / "preprocess").glob("*.json")):
        shutil.copyfile(path, bundle_dir / path.name)
        names.append(path.name)
    return names


def run_train(cfg: PipelineConfig, stage: str = "all") -> dict:
    """Train one stage (loading its upstream stages from the bundle) or every stage."""
    if stage not in TRAIN_STAGES + ("all",):
        raise ConfigError(f"unknown train stage {stage!r}")
    lay = Layout(cfg)
    files = training_inputs(cfg)
    require(lay.standardizer())
    data = _load_family_data(files)
    for fam, parts in data.items():
        if len(parts["train"]) == 0:
            raise DataError(f"no {fam} training samples")
    digest = _train_digest(cfg, files)
    b = Bundle(lay.bundle())
    b.root.mkdir(parents=True, exist_ok=True)
    videos = sorted({str(v) for parts in data.values() for v in parts["train"].video_ids})
    plan = ensemble.make_fold_plan(videos, cfg.folds, cfg.seed)
    b.save_fold_plan(plan)
    scfg = stack_config(cfg)
    stages = TRAIN_STAGES if stage == "all" else (stage,)
    if "fusion" in stages and set(cfg.tasks) != set(TASKS):
        if stage == "fusion":
            raise ConfigError("fusion needs all three tasks configured")
        stages = tuple(s for s in stages if s != "fusion")

    def ds_for(task):
        parts = data[family_of(task)]
        return parts["train"], parts["valid"]

    scores = {}
    for st in stages:
        for task in cfg.tasks:
            train, valid = ds_for(task)
            if st == "subgroup":
                for term in train.terms:
                    gs = ensemble.train_group_models(train, term, task, scfg, plan, valid)
                    b.save_group_stage(gs, digest)
            elif st == "single-term":
                for term in train.terms:
                    gs = b.load_group_stage(task, term, digest)
                    res = ensemble.train_single_term_from(gs, train, scfg, plan, valid)
                    b.save_single_term(res, digest)
            elif st == "multi-term":
                terms = {t: b.load_single_term(task, t, digest) for t in train.terms}
                res = ensemble.train_multi_term(train, task, terms, scfg, plan, valid)
                b.save_multi_term(res, digest)
            else:
                multi = {t: b.load_multi_term(t, digest) for t in TASKS}
                res = ensemble.train_fusion(task, multi, train, scfg, plan, valid)
                b.save_fusion(res, digest)
            log.info("trained %s stage for %s", st, task)
    manifest = _write_bundle_manifest(cfg, lay, b, digest, plan)
    write_run_manifest(cfg, f"train-{stage}", files.values(),
                       sorted(p for p in b.root.rglob("*.json")), {"stage": stage})
    scores["stages"] = manifest["stages"]
    return scores


def _write_bundle_manifest(cfg, lay, b: Bundle, digest, plan) -> dict:
    data_schema = load_windowed_schema(training_inputs(cfg))
    stages = sorted(p.stem for p in (b.root / "stages").glob("*.json"))
    wiring = {}
    for name in stages:
        doc = read_json(b.stage_path(name))
        entry = {"kind": doc["kind"]}
        for key in ("groups", "terms", "input_names", "sub_stage", "term_stages",
                    "target_stage", "other_stages"):
            if key in doc:
                entry[key] = doc[key]
        if doc["kind"] == "subgroup":
            entry["selected"] = {g: v["selected"] for g, v in doc["refit"].items()}
        wiring[name] = entry
    manifest = {
        "config_digest": cfg.digest(),
        "train_digest": digest,
        "tasks": list(cfg.tasks),
        "schema": data_schema,
        "seeds": {"seed": cfg.seed, "learner": cfg.learner.seed,
                  "combiner": cfg.combiner.seed, "balance": cfg.balance.seed},
        "folds": plan.k,
        "fold_plan": "fold_plan.json",
        "preprocessing": _copy_preprocessing(lay, b.root),
        "stages": stages,
        "wiring": wiring,
    }
    write_json(b.root / "manifest.json", manifest)
    return manifest


def load_windowed_schema(files) -> dict:
    out = {}
    for key, path in files.items():
        out[key.split("_")[0]] = read_json(schema_path(path))
    return out


# prediction -----------------------------------------------------------------

PREDICT_STAGES = ("auto", "fusion", "multi-term", "single-term")


def load_predictor(b: Bundle, task: str, stage: str = "auto", term: str = "short"):
    if stage == "auto":
        stage = "fusion" if b.has_stage(Bundle.fusion_name(task)) else "multi-term"
    if stage == "fusion":
        return b.load_fusion(task)
    if stage == "multi-term":
        return b.load_multi_term(task).model
    if stage == "single-term":
        return b.load_single_term(task, term).model
    raise ConfigError(f"unknown prediction stage {stage!r}")


def check_against_manifest(b: Bundle, ds: WindowedDataset, fam: str) -> None:
    manifest = read_json(b.root / "manifest.json", "bundle manifest")
    expected = manifest["schema"].get(fam)
    if expected is None:
        raise ManifestError(f"bundle has no schema for family {fam!r}")
    for term in expected["terms"]:
        if term not in ds.terms:
            raise ManifestError(f"term {term!r} missing from data")
    for g, d in expected["groups"].items():
        if ds.groups.get(g) != d:
            raise ManifestError(f"group {g!r}: data has dim {ds.groups.get(g)}, bundle has {d}")


def predict_dataset(b: Bundle, ds: WindowedDataset, tasks, stage="auto", term="short") -> dict:
    out = {}
    for task in tasks:
        model = load_predictor(b, task, stage, term)
        out[task] = ensemble.predict_pipeline(model, ds)
    return out


def write_predictions(path, ds: WindowedDataset, preds: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["video_id", "anchor"]
    cols = []
    for task in TASKS:
        if task not in preds:
            continue
        if task == "expression":
            header += ["expression"] + [f"p{c}" for c in range(7)]
        else:
            header.append(task)
        cols.append(task)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [ds.video_ids[i], fmt_float(ds.anchors[i])]
            for task in cols:
                if task == "expression":
                    cls, prob = preds[task]
                    row += [str(int(cls[i]))] + [fmt_float(p) for p in prob[i]]
                else:
                    row.append(fmt_float(preds[task][i]))
            w.writerow(row)


def run_predict(cfg: PipelineConfig, split: str = "valid", stage: str = "auto",
                term: str = "short") -> dict[str, Path]:
    if stage not in PREDICT_STAGES:
        raise ConfigError(f"unknown prediction stage {stage!r}")
    lay = Layout(cfg)
    b = Bundle(lay.bundle())
    require(b.root / "manifest.json")
    written, inputs = {}, []
    for fam, tasks in family_tasks(cfg).items():
        src = require(lay.windowed(fam, split))
        ds = load_windowed(src)
        check_against_manifest(b, ds, fam)
        preds = predict_dataset(b, ds, tasks, stage, term)
        path = lay.predictions(fam, split, stage)
        write_predictions(path, ds, preds)
        written[fam] = path
        inputs.append(src)
    inputs += sorted(b.root.rglob("*.json"))
    write_run_manifest(cfg, f"predict-{split}", inputs, written.values(),
                       {"stage": stage, "term": term})
    return written


def read_predictions(path) -> dict:
    path = require(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    out = {"video_id": [r[0] for r in rows], "anchor": np.array([float(r[1]) for r in rows])}
    for task in ("valence", "arousal"):
        if task in header:
            j = header.index(task)
            out[task] = np.array([float(r[j]) for r in rows])
    if "expression" in header:
        j = header.index("expression")
        out["expression"] = np.array([int(r[j]) for r in rows], dtype=np.int64)
    return out


def run_evaluate(cfg: PipelineConfig, split: str = "valid",
                 stage: str = "auto") -> metrics.EvalReport:
    lay = Layout(cfg)
    preds, truth, inputs = {}, {}, []
    for fam, tasks in family_tasks(cfg).items():
        wpath = require(lay.windowed(fam, split))
        ppath = lay.predictions(fam, split, stage)
        ds = load_windowed(wpath)
        p = read_predictions(ppath)
        if list(map(str, ds.video_ids)) != p["video_id"] or not np.array_equal(
                np.array([float(fmt_float(a)) for a in ds.anchors]), p["anchor"]):
            raise ManifestError(f"{ppath}: rows do not line up with {wpath}")
        for task in tasks:
            preds[task] = p[task]
            truth[task] = ds.label(task, "short")
        inputs += [wpath, ppath]
    report = metrics.evaluate(preds, truth)
    base = lay.report(split, stage)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".txt").write_text(report.to_text() + "\n")
    write_json(base.with_suffix(".json"), report.to_dict())
    write_run_manifest(cfg, f"evaluate-{split}", inputs,
                       [base.with_suffix(".txt"), base.with_suffix(".json")])
    return report


def run_gridsearch(cfg: PipelineConfig, term: str = "short", group: str | None = None) -> dict:
    """Grid over the configured learner on one term (all groups, or one), per task."""
    lay = Layout(cfg)
    results, inputs, outputs = {}, [], []
    for fam, tasks in family_tasks(cfg).items():
        tpath = lay.balanced(fam) if cfg.balance.enabled else lay.windowed(fam, "train")
        vpath = lay.windowed(fam, "valid")
        train, valid = load_windowed(require(tpath)), load_windowed(require(vpath))
        if len(valid) == 0:
            raise DataError(f"grid search needs validation samples for {fam}")
        if term not in train.terms:
            raise ConfigError(f"unknown term {term!r}")
        groups = [group] if group else list(train.groups)
        for g in groups:
            if g not in train.groups:
                raise ConfigError(f"unknown group {g!r}")
        x = np.hstack([train.features[term][g] for g in groups])
        xv = np.hstack([valid.features[term][g] for g in groups])
        for task in tasks:
            best, rows = gbdt.grid_search(
                cfg.grid, (x, train.label(task, term)), (xv, valid.label(task, term)),
                ensemble.objective_for(task), cfg.learner)
            path = lay.gridsearch(task, term, group)
            _write_grid(path, rows)
            outputs.append(path)
            results[task] = {k: getattr(best, k) for k in gbdt.TUNED_PARAMS}
        inputs += [tpath, vpath]
    best_path = lay.root / "gridsearch" / f"best_{term}{'_' + group if group else ''}.json"
    write_json(best_path, results)
    write_run_manifest(cfg, "gridsearch", inputs, outputs + [best_path])
    return results


def _write_grid(path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = [k for k in rows[0] if k not in ("score", "best_iteration")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["score", "best_iteration"])
        for r in rows:
            w.writerow([r[k] for k in keys] + [fmt_float(r["score"]), r["best_iteration"]])
