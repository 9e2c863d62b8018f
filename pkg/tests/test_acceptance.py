"""Acceptance criteria A1-A9, each recorded as one PASS/FAIL line in the run summary."""
import contextlib
import filecmp
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import yaml
from conftest import ACCEPTANCE, random_windowed

from mtfusion import gbdt, pipeline
from mtfusion.balancing import (VaGrid, balance_expression, balance_va, expression_counts,
                                region_counts, va_region_index)
from mtfusion.bundle import Bundle
from mtfusion.config import from_dict
from mtfusion.data import TASKS, FrameSequence, LabelTrack
from mtfusion.decomposition import fit_pca
from mtfusion.ensemble import (make_fold_plan, predict_pipeline, train_fusion,
                               train_group_models, train_multi_term, train_single_term_from)
from mtfusion.gbdt import GbdtParams
from mtfusion.metrics import (accuracy, ccc, combine_expression, custom_regression_metric,
                              evaluate, macro_f1, per_class_f1, va_score)
from mtfusion.synthetic import SyntheticSpec, write_corpus
from mtfusion.windowing import WindowConfig, anchor_times, extract_multiterm, load_windowed, slope

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
NAMES = {
    "A1": "metric exactness", "A2": "windowing", "A3": "multi-term > single-term",
    "A4": "multi-task >= multi-term - 0.01", "A5": "balancing counts",
    "A6": "learner soundness", "A7": "PCA", "A8": "determinism & persistence",
    "A9": "leakage audit",
}


@contextlib.contextmanager
def criterion(key):
    """Record PASS with the detail list, or FAIL with the first failing check."""
    detail: list[str] = []
    try:
        yield detail
    except BaseException as exc:
        msg = " ".join(str(exc).split())[:160]
        ACCEPTANCE[key] = f"{key} FAIL {NAMES[key]}: {msg}"
        raise
    ACCEPTANCE[key] = f"{key} PASS {NAMES[key]}: {'; '.join(detail)}"


def desk_config(corpus, output, **over):
    raw = yaml.safe_load(DESK.read_text())
    raw.update(corpus=str(corpus), output=str(output), **over)
    return from_dict(raw)


def stage_scores(cfg):
    """Validation EvalReports per stage from a trained bundle."""
    lay = pipeline.Layout(cfg)
    b = Bundle(lay.bundle())
    fams = pipeline.family_tasks(cfg)
    data = {fam: load_windowed(lay.windowed(fam, "valid")) for fam in fams}

    def score(stage, term="short"):
        preds, truth = {}, {}
        for fam, tasks in fams.items():
            for task, p in pipeline.predict_dataset(b, data[fam], tasks, stage, term).items():
                preds[task] = p[0] if task == "expression" else p
                truth[task] = data[fam].label(task, "short")
        return evaluate(preds, truth)

    out = {f"single-term.{t}": score("single-term", t) for t in data["va"].terms}
    out["multi-term"] = score("multi-term")
    if set(cfg.tasks) == set(TASKS):
        out["fusion"] = score("fusion")
    return out


def full_run(cfg):
    pipeline.run_extract(cfg)
    if cfg.balance.enabled:
        pipeline.run_balance(cfg)
    pipeline.run_train(cfg)
    for split in pipeline.SPLITS:
        pipeline.run_predict(cfg, split)


# --------------------------------------------------------------------------- A1

def ccc_direct(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * cov / (vx + vy + (mx - my) ** 2)


def f1_from_confusion(pred, truth):
    cm = [[0] * 7 for _ in range(7)]
    for p, t in zip(pred, truth):
        cm[t][p] += 1
    f1 = {}
    for c in range(7):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(7)) - tp
        fn = sum(cm[c]) - tp
        if tp + fp + fn:
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1[c] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    acc = sum(cm[c][c] for c in range(7)) / len(pred)
    return f1, acc


def test_a1_metric_exactness():
    with criterion("A1") as detail:
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 501))
            x = rng.normal(size=n) * rng.uniform(0.1, 3)
            y = 0.5 * x + rng.normal(size=n) + rng.normal()
            worst = max(worst, abs(ccc(x, y) - ccc_direct(x.tolist(), y.tolist())))
        assert worst < 1e-10, f"CCC deviates by {worst:.3g}"
        a, b = rng.uniform(-1, 1, 2)
        assert va_score(a, b) == (a + b) / 2
        f, c = rng.uniform(0, 1, 2)
        assert combine_expression(f, c) == 0.67 * f + 0.33 * c
        for _ in range(50):
            truth = rng.integers(0, 7, 500)
            pred = np.where(rng.random(500) < 0.4, truth, rng.integers(0, 7, 500))
            ref, acc = f1_from_confusion(pred.tolist(), truth.tolist())
            _, _, f1, present = per_class_f1(pred, truth)
            assert sorted(np.flatnonzero(present)) == sorted(ref)
            assert all(f1[k] == v for k, v in ref.items())
            assert macro_f1(pred, truth) == sum(ref.values()) / len(ref)
            assert accuracy(pred, truth) == acc
        p2 = np.array([1.0, 2.0])
        assert custom_regression_metric(p2, p2 - 1) == pytest.approx(2 / 3 - 1, abs=1e-15)
        elapsed = time.perf_counter() - t0
        assert elapsed < 10, f"took {elapsed:.1f} s"
        detail += [f"max CCC error {worst:.1e}", "score arithmetic exact",
                   "F1/acc exact on 50x500", f"{elapsed:.1f} s"]


# --------------------------------------------------------------------------- A2

def loop_stats(vals, ts):
    n = len(vals)
    m = sum(vals) / n
    sd = math.sqrt(sum((v - m) ** 2 for v in vals) / n)
    tm = sum(ts) / n
    num = sum((t - tm) * (v - m) for t, v in zip(ts, vals))
    den = sum((t - tm) ** 2 for t in ts)
    return m, sd, max(vals) - min(vals), num / den


def test_a2_windowing():
    with criterion("A2") as detail:
        rng = np.random.default_rng(202)
        for _ in range(100):
            w_max = float(rng.uniform(0.5, 20))
            stride = float(rng.choice([0.1, 0.2, 0.25, 0.5, rng.uniform(0.05, 2)]))
            duration = float(w_max + rng.uniform(0, 60))
            got = anchor_times(duration, w_max, stride)
            # enumerate right edges w_max + i*stride that fit inside the video
            want = 0
            while w_max + want * stride <= duration + 1e-9 * stride:
                want += 1
            assert len(got) == want == math.floor((duration - w_max) / stride + 1e-9) + 1
            assert got[-1] <= duration + 1e-9
        fps = 10.0
        n = 200
        x = rng.normal(size=(n, 3))
        seq = FrameSequence("v", fps, np.arange(n) / fps, {"g": x})
        for task in TASKS:
            vals = rng.integers(0, 7, n) if task == "expression" else rng.uniform(-1, 1, n)
            seq = seq.with_labels(LabelTrack(task, vals, np.ones(n, bool)))
        cfg = WindowConfig({"short": 1.0, "middle": 6.0, "long": 12.0}, 0.2, fps)
        ds = extract_multiterm(seq, cfg, TASKS)
        worst = 0.0
        for i in range(0, len(ds), 7):
            end = int(round(ds.anchors[i] * fps))
            for term in cfg.terms:
                w = cfg.frames(term)
                for d in range(3):
                    ref = loop_stats(x[end - w:end, d].tolist(), seq.timestamps[end - w:end])
                    got = ds.features[term]["g"][i, 4 * d:4 * d + 4]
                    worst = max(worst, float(np.max(np.abs(got - np.array(ref)))))
        assert worst < 1e-10, f"window stats deviate by {worst:.3g}"
        t = np.sort(rng.uniform(0, 10, 40))
        a, b = rng.normal(size=2)
        assert abs(slope(a * t + b, t) - a) < 1e-9
        detail += ["100 anchor counts", f"stats max error {worst:.1e}", "affine slope exact"]


# ----------------------------------------------------------------------- A3, A4

@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_corpus")
    spec = SyntheticSpec()
    assert (spec.seed, spec.videos - spec.valid_videos, spec.valid_videos,
            spec.duration) == (7, 40, 10, 60.0)
    return write_corpus(spec, root / "corpus")


@pytest.fixture(scope="module")
def full_stack(default_corpus, tmp_path_factory):
    cfg = desk_config(default_corpus, tmp_path_factory.mktemp("full") / "out")
    t0 = time.perf_counter()
    pipeline.run_extract(cfg)
    pipeline.run_train(cfg)
    return cfg, stage_scores(cfg), time.perf_counter() - t0


@pytest.mark.slow
def test_a3_multi_term_beats_single_term(default_corpus, tmp_path_factory):
    with criterion("A3") as detail:
        # valence and arousal only: the A3 model and everything it depends on
        cfg = desk_config(default_corpus, tmp_path_factory.mktemp("a3") / "out",
                          tasks=["valence", "arousal"])
        t0 = time.perf_counter()
        pipeline.run_extract(cfg)
        pipeline.run_train(cfg)
        elapsed = time.perf_counter() - t0
        scores = stage_scores(cfg)
        single = {k: s.ccc_valence for k, s in scores.items() if k.startswith("single")}
        best = max(single.values())
        multi = scores["multi-term"].ccc_valence
        detail += [f"multi {multi:.4f}", f"best single {best:.4f}",
                   f"margin {multi - best:+.4f}", f"{elapsed:.0f} s"]
        assert multi - best >= 0.02, f"margin {multi - best:+.4f} < 0.02 ({single})"
        assert elapsed < 300, f"took {elapsed:.0f} s"


@pytest.mark.slow
def test_a4_fusion_not_worse(full_stack):
    with criterion("A4") as detail:
        _, scores, elapsed = full_stack
        multi, fused = scores["multi-term"].va_score, scores["fusion"].va_score
        detail += [f"fusion VA {fused:.4f}", f"multi-term VA {multi:.4f}",
                   f"diff {fused - multi:+.4f}", f"{elapsed:.0f} s"]
        assert fused >= multi - 0.01, f"fusion {fused:.4f} < multi-term {multi:.4f} - 0.01"


# --------------------------------------------------------------------------- A5

def test_a5_balancing_counts():
    with criterion("A5") as detail:
        rng = np.random.default_rng(505)
        for i in range(50):
            n = int(rng.integers(1, 400))
            ds = random_windowed(rng, n_videos=1, per_video=n)
            p = rng.dirichlet(np.ones(7) * 0.5)
            ds.labels["short"]["expression"] = rng.choice(7, n, p=p)
            ds.labels["short"]["valence"] = np.clip(rng.normal(0, .4, n), -1, 1)
            ds.labels["short"]["arousal"] = np.clip(rng.normal(0, .4, n), -1, 1)
            before = Counter(ds.labels["short"]["expression"].tolist())
            after = expression_counts(balance_expression(ds, seed=i))
            assert after[0] == math.ceil(before[0] / 2)
            assert all(after[c] == 2 * before[c] for c in range(1, 7))
            center = frozenset(int(r) for r in rng.choice(64, int(rng.integers(0, 6)),
                                                          replace=False))
            regions = Counter(va_region_index(v, a) for v, a in
                              zip(ds.labels["short"]["valence"], ds.labels["short"]["arousal"]))
            out = balance_va(ds, VaGrid(center), seed=i)
            want = sum(math.ceil(k / 2) if r in center else 2 * k for r, k in regions.items())
            assert len(out) == want
            got = region_counts(out)
            assert all(got[r] == (math.ceil(k / 2) if r in center else 2 * k)
                       for r, k in regions.items())
        detail.append("50 random datasets recounted")


# --------------------------------------------------------------------------- A6

def stump_prediction(x, y, mcs, lr):
    n = len(y)
    base = y.mean()
    g = base - y
    best = (-np.inf, None, None)
    for f in range(x.shape[1]):
        vals = np.unique(x[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            left = x[:, f] <= (lo + hi) / 2
            nl = int(left.sum())
            if min(nl, n - nl) < mcs:
                continue
            gl, gr = g[left].sum(), g[~left].sum()
            gain = gl * gl / nl + gr * gr / (n - nl) - g.sum() ** 2 / n
            if gain > best[0] + 1e-12:
                best = (gain, f, (lo + hi) / 2)
    left = x[:, best[1]] <= best[2]
    out = np.full(n, base)
    out[left] -= lr * g[left].mean()
    out[~left] -= lr * g[~left].mean()
    return out


def test_a6_learner_soundness():
    with criterion("A6") as detail:
        rng = np.random.default_rng(606)
        x = rng.normal(size=(500, 5))
        y = np.sin(x[:, 0]) + x[:, 1] * x[:, 2] + rng.normal(0, .3, 500)
        m = gbdt.train_regressor((x, y), params=GbdtParams(num_rounds=100, num_leaves=15,
                                                           min_child_samples=10))
        loss = np.array(m.train_loss)
        assert len(loss) == 101 and np.all(np.diff(loss) <= 1e-12), "training loss increased"
        worst = 0.0
        for seed in range(10):
            r = np.random.default_rng(seed)
            xs = r.normal(size=(150, 3)).round(1)
            ys = xs[:, 0] ** 2 + r.normal(0, .2, 150)
            mcs = int(r.integers(1, 30))
            p = GbdtParams(num_rounds=1, max_depth=1, learning_rate=0.5, min_child_samples=mcs)
            got = gbdt.predict(gbdt.train_regressor((xs, ys), params=p), xs)
            worst = max(worst, float(np.max(np.abs(got - stump_prediction(xs, ys, mcs, 0.5)))))
        assert worst < 1e-9, f"stump deviates by {worst:.3g}"
        labels = rng.integers(0, 7, 500)
        clf = gbdt.train_classifier((x, labels), params=GbdtParams(num_rounds=20, num_leaves=7))
        prob = gbdt.predict(clf, rng.normal(size=(1000, 5)) * 2)
        psum = float(np.max(np.abs(prob.sum(axis=1) - 1)))
        assert psum < 1e-9
        audited = 0
        for model, leaves, mcs in ((m, 15, 10), (clf, 7, 20)):
            for _, tree in model.iter_trees():
                leaf = tree.feature < 0
                assert tree.n_leaves <= leaves and np.all(tree.count[leaf] >= mcs)
                audited += 1
        detail += ["loss non-increasing over 100 rounds", f"stump max error {worst:.1e}",
                   f"prob sum error {psum:.1e}", f"caps hold on {audited} trees"]


# --------------------------------------------------------------------------- A7

def test_a7_pca():
    with criterion("A7") as detail:
        rng = np.random.default_rng(707)
        data = rng.normal(size=(200, 10)) @ rng.normal(size=(10, 10))
        model = fit_pca(data, 3)
        ortho = float(np.max(np.abs(model.components @ model.components.T - np.eye(3))))
        assert ortho < 1e-8
        w, v = np.linalg.eigh(np.cov(data, rowvar=False))
        ref = v[:, np.argsort(w)[::-1][:3]].T
        sign = np.sign(np.sum(ref * model.components, axis=1))[:, None]
        dev = float(np.max(np.abs(ref * sign - model.components)))
        assert dev < 1e-6
        t = np.linspace(-2, 3, 50)
        col = fit_pca(np.column_stack([t, -3 * t + 1]), 1)
        ratio = col.explained_variance[0] / col.total_variance
        assert ratio == pytest.approx(1.0, abs=1e-12)
        detail += [f"orthonormal within {ortho:.1e}", f"oracle deviation {dev:.1e}",
                   "collinear variance 100%"]


# --------------------------------------------------------------------------- A8

def small_config(corpus, output, **over):
    over.setdefault("balance", {"enabled": True})
    over.setdefault("feature_selection", {"enabled": True})
    over.setdefault("folds", 3)
    return desk_config(corpus, output, **over)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    spec = SyntheticSpec(videos=9, valid_videos=3, duration=30, seed=11)
    return write_corpus(spec, tmp_path_factory.mktemp("small") / "corpus")


def same_files(a: Path, b: Path) -> list[str]:
    names = sorted(p.name for p in a.glob("*.csv"))
    assert names == sorted(p.name for p in b.glob("*.csv")) and names
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors, f"differing CSVs: {mismatch + errors}"
    return names


@pytest.mark.slow
def test_a8_determinism_and_persistence(small_corpus, tmp_path_factory):
    with criterion("A8") as detail:
        outs = []
        for run in ("r1", "r2"):
            cfg = small_config(small_corpus, tmp_path_factory.mktemp(run) / "out")
            full_run(cfg)
            outs.append(pipeline.Layout(cfg).root)
        names = same_files(outs[0] / "predictions", outs[1] / "predictions")
        same_files(outs[0] / "windowed", outs[1] / "windowed")
        detail.append(f"{len(names)} prediction CSVs byte-identical")

        # every stage: in-memory model vs its reloaded bundle copy
        va = load_windowed(outs[0] / "windowed" / "va_train.csv")
        ex = load_windowed(outs[0] / "windowed" / "expr_train.csv")
        vv = load_windowed(outs[0] / "windowed" / "va_valid.csv")
        ev = load_windowed(outs[0] / "windowed" / "expr_valid.csv")
        data = {"valence": (va, vv), "arousal": (va, vv), "expression": (ex, ev)}
        scfg = pipeline.stack_config(cfg)
        plan = make_fold_plan(sorted(set(va.video_ids) | set(ex.video_ids)), 3)
        b = Bundle(tmp_path_factory.mktemp("bundle"))
        singles, multis, checked = {}, {}, 0
        for task in TASKS:
            tr, vl = data[task]
            singles[task] = {}
            for term in tr.terms:
                gs = train_group_models(tr, term, task, scfg, plan, vl)
                b.save_group_stage(gs, "d")
                singles[task][term] = train_single_term_from(gs, tr, scfg, plan, vl)
                b.save_single_term(singles[task][term], "d")
            multis[task] = train_multi_term(tr, task, singles[task], scfg, plan, vl)
            b.save_multi_term(multis[task], "d")
        for task in TASKS:
            tr, vl = data[task]
            fus = train_fusion(task, multis, tr, scfg, plan, vl)
            b.save_fusion(fus, "d")
            pairs = [(fus.model, b.load_fusion(task, "d")),
                     (multis[task].model, b.load_multi_term(task, "d").model)]
            for term in tr.terms:
                back = b.load_single_term(task, term, "d").model
                pairs.append((singles[task][term].model, back))
                for g in back.groups:
                    x = vl.features[term][g]
                    assert np.array_equal(singles[task][term].model.sub_models[g].output(x),
                                          back.sub_models[g].output(x))
                    checked += 1
            for live, loaded in pairs:
                a, c = predict_pipeline(live, vl), predict_pipeline(loaded, vl)
                if task == "expression":
                    a, c = a[1], c[1]
                assert np.array_equal(a, c), f"{task} reload differs"
                checked += 1
        detail.append(f"{checked} reloaded models bit-identical")


# --------------------------------------------------------------------------- A9

@pytest.mark.slow
@pytest.mark.parametrize("k", [3, 5])
def test_a9_leakage_audit(small_corpus, tmp_path_factory, k):
    key = "A9"
    try:
        cfg = small_config(small_corpus, tmp_path_factory.mktemp(f"k{k}") / "out", folds=k)
        pipeline.run_extract(cfg)
        pipeline.run_balance(cfg)
        pipeline.run_train(cfg)
        b = Bundle(pipeline.Layout(cfg).bundle())
        plan = b.load_fold_plan()
        audits = b.load_audits()
        assert plan.k == k and audits
        rows = 0
        for a in audits:
            # each row's producer is the chain that held out the row's own fold
            np.testing.assert_array_equal(a.producer, plan.folds_of(a.row_videos))
            for fold, seen in enumerate(a.trained_on):
                assert not set(seen) & set(plan.videos_in(fold)), a.stage
            assert a.violations() == 0, a.stage
            rows += len(a.row_videos)
        line = f"K={k}: {len(audits)} stages, {rows} rows, 0 violations"
        prev = ACCEPTANCE.get(key)
        if prev is None:
            ACCEPTANCE[key] = f"{key} PASS {NAMES[key]}: {line}"
        else:
            ACCEPTANCE[key] = f"{prev}; {line}"     # a failing K keeps the FAIL tag
    except BaseException as exc:
        msg = f"K={k}: {' '.join(str(exc).split())[:160]}"
        prev = ACCEPTANCE.get(key, "")
        rest = prev.split(": ", 1)[1] + "; " if prev else ""
        ACCEPTANCE[key] = f"{key} FAIL {NAMES[key]}: {rest}{msg}"
        raise
