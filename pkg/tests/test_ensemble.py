import numpy as np
import pytest
from conftest import random_windowed
from hypothesis import given
from hypothesis import strategies as st

from mtfusion.bundle import Bundle
from mtfusion.data import TASKS
from mtfusion.ensemble import (FoldPlan, OofAudit, StackConfig, make_fold_plan, model_output,
                               predict_pipeline, train_fusion, train_group_models,
                               train_multi_term, train_single_term,
                               train_single_term_from)
from mtfusion.errors import ConfigError, ManifestError, StageDependencyError
from mtfusion.gbdt import GbdtParams
from mtfusion.metrics import ccc

LIGHT = GbdtParams(num_leaves=7, min_child_samples=5, num_rounds=15, learning_rate=0.3)
CFG = StackConfig(LIGHT, LIGHT)
TERMS3 = {"short": 1.0, "middle": 6.0, "long": 12.0}


def with_signal(ds, rng, noise=0.3):
    """Labels driven by the first column of each group, so the stack has something to learn."""
    for term in ds.terms:
        f = ds.features[term]
        base = sum(m[:, 0] for m in f.values())
        other = sum(m[:, 1] for m in f.values())
        n = len(ds)
        ds.labels[term]["valence"] = np.tanh(0.5 * base + rng.normal(0, noise, n))
        ds.labels[term]["arousal"] = np.tanh(0.5 * other + rng.normal(0, noise, n))
        ds.labels[term]["expression"] = np.digitize(base + rng.normal(0, noise, n),
                                                    [-2, -1, -.5, 0, .5, 1]).astype(np.int64)
    return ds


def make(rng, n_videos, per_video=25, groups=None, terms=TERMS3):
    return with_signal(random_windowed(rng, n_videos, per_video, groups, terms), rng)


@pytest.fixture(scope="module")
def stack():
    rng = np.random.default_rng(7)
    ds, valid = make(rng, 6), make(rng, 2)
    plan = make_fold_plan(ds, 3, seed=0)
    groups = {(task, t): train_group_models(ds, t, task, CFG, plan, valid)
              for task in TASKS for t in ds.terms}
    single = {task: {t: train_single_term_from(groups[task, t], ds, CFG, plan, valid)
                     for t in ds.terms} for task in TASKS}
    multi = {task: train_multi_term(ds, task, single[task], CFG, plan, valid) for task in TASKS}
    fusion = {task: train_fusion(task, multi, ds, CFG, plan, valid) for task in TASKS}
    return ds, valid, plan, single, multi, fusion, groups


def test_fold_plan():
    vids = [f"v{i}" for i in range(10)]
    plan = make_fold_plan(vids, 5, seed=3)
    assert plan == make_fold_plan(list(reversed(vids)) * 2, 5, seed=3)
    assert sorted(v for k in range(5) for v in plan.videos_in(k)) == sorted(vids)
    assert all(len(plan.videos_in(k)) == 2 for k in range(5))
    assert FoldPlan.from_dict(plan.to_dict()) == plan
    with pytest.raises(ManifestError):
        plan.folds_of(["nope"])
    with pytest.raises(ConfigError):
        make_fold_plan(vids, 1)
    with pytest.raises(ConfigError):
        make_fold_plan(vids[:3], 5)


@given(st.integers(2, 40), st.integers(2, 8), st.integers(0, 100))
def test_fold_plan_balanced(n, k, seed):
    if n < k:
        return
    plan = make_fold_plan([f"x{i}" for i in range(n)], k, seed)
    sizes = [len(plan.videos_in(f)) for f in range(k)]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n


def test_group_sub_model_widths(rng):
    groups = {f"g{i}": 2 for i in range(5)}
    ds = make(rng, 4, 20, groups=groups, terms={"short": 1.0})
    plan = make_fold_plan(ds, 2)
    cfg = StackConfig(GbdtParams(num_rounds=3, min_child_samples=5), LIGHT)
    gs = train_group_models(ds, "short", "expression", cfg, plan)
    assert gs.oof.shape == (len(ds), 35)
    np.testing.assert_allclose(gs.oof.reshape(len(ds), 5, 7).sum(axis=2), 1.0, atol=1e-9)
    gs = train_group_models(ds, "short", "valence", cfg, plan)
    assert gs.oof.shape == (len(ds), 5)


def test_stack_widths(stack):
    ds, _, _, single, multi, fusion, _ = stack
    assert single["valence"]["short"].model.combiner_width == 2
    assert single["expression"]["short"].model.combiner_width == 14
    assert multi["valence"].model.combiner_width == 3
    assert multi["expression"].model.combiner_width == 21
    assert fusion["valence"].model.combiner_width == 11
    assert fusion["arousal"].model.combiner_width == 11
    assert fusion["expression"].model.combiner_width == 23
    assert fusion["valence"].model.inputs(ds).shape == (len(ds), 11)
    assert fusion["expression"].model.input_names[:2] == ["expression.short.p0",
                                                           "expression.short.p1"]


def test_four_term_width(rng):
    terms = {"short": 1.0, "optional_mid": 3.0, "middle": 6.0, "long": 12.0}
    ds = make(rng, 4, 20, terms=terms)
    plan = make_fold_plan(ds, 2)
    single = {t: train_single_term(ds, t, "arousal", CFG, plan) for t in ds.terms}
    mt = train_multi_term(ds, "arousal", single, CFG, plan)
    assert mt.model.combiner_width == 4
    assert mt.model.terms == list(terms)
    with pytest.raises(ConfigError):
        train_multi_term(ds, "arousal", {"short": single["short"]}, CFG, plan)


def test_no_oof_leakage(stack):
    _, _, _, single, multi, fusion, _ = stack
    audits = [a for task in TASKS for r in single[task].values() for a in r.audits]
    audits += [a for task in TASKS for a in multi[task].audits + fusion[task].audits]
    assert len(audits) == 3 * 3 * 2 + 3 + 3
    for a in audits:
        assert np.all(a.producer >= 0)
        assert a.violations() == 0, a.stage


def test_audit_detects_leak():
    a = OofAudit("x", np.array(["a", "b"], dtype=object), np.array([0, 1]), [["b"], ["b"]])
    assert a.violations() == 1


def test_fold_chain_never_sees_its_fold(stack):
    _, _, plan, single, multi, _, _ = stack
    for k in range(plan.k):
        held = set(plan.videos_in(k))
        assert not held & set(multi["valence"].model.fold_videos[k])
        assert not held & set(single["expression"]["long"].model.fold_videos[k])


def test_single_group_combiner_tracks_sub_model(rng):
    ds = make(rng, 6, 40, groups={"g": 2}, terms={"short": 1.0})
    valid = make(rng, 3, 40, groups={"g": 2}, terms={"short": 1.0})
    plan = make_fold_plan(ds, 3)
    res = train_single_term(ds, "short", "valence", CFG, plan, valid)
    m = res.model
    y = valid.label("valence")
    sub = m.sub_outputs(valid)[:, 0]
    comb = m.output(valid)[:, 0]
    assert abs(ccc(y, comb) - ccc(y, sub)) < 0.02


def test_fusion_equals_manual_composition(stack):
    _, valid, _, _, multi, fusion, _ = stack
    fm = fusion["arousal"].model
    blocks = [multi["arousal"].model.term_models[t].output(valid) for t in fm.target.terms]
    blocks += [multi["valence"].model.output(valid), multi["expression"].model.output(valid)]
    manual = model_output(fm.combiner, np.hstack(blocks))[:, 0]
    np.testing.assert_array_equal(predict_pipeline(fm, valid), manual)
    labels, prob = predict_pipeline(fusion["expression"].model, valid)
    np.testing.assert_array_equal(labels, np.argmax(prob, axis=1))


def test_empty_dataset_prediction(stack):
    _, valid, _, _, multi, fusion, _ = stack
    empty = valid.subset(np.array([], dtype=np.int64))
    assert predict_pipeline(multi["valence"].model, empty).shape == (0,)
    labels, prob = predict_pipeline(fusion["expression"].model, empty)
    assert labels.shape == (0,) and prob.shape == (0, 7)


def test_schema_mismatch(stack):
    _, valid, _, single, _, _, _ = stack
    broken = valid.subset(np.arange(len(valid)))
    del broken.features["short"]["gaze"]
    with pytest.raises(ManifestError):
        single["valence"]["short"].model.output(broken)
    del broken.features["long"]
    with pytest.raises(ManifestError):
        single["valence"]["long"].model.output(broken)


def test_fusion_requires_every_task(stack):
    ds, _, plan, _, multi, _, _ = stack
    with pytest.raises(ConfigError):
        train_fusion("valence", {"valence": multi["valence"]}, ds, CFG, plan)


def test_bundle_roundtrip(stack, tmp_path):
    _, valid, plan, single, multi, fusion, groups = stack
    b = Bundle(tmp_path)
    b.save_fold_plan(plan)
    for gs in groups.values():
        b.save_group_stage(gs, "d0")
    for task in TASKS:
        for res in single[task].values():
            b.save_single_term(res, "d0")
        b.save_multi_term(multi[task], "d0")
        b.save_fusion(fusion[task], "d0")
    assert b.load_fold_plan() == plan
    for task in TASKS:
        back = b.load_fusion(task, "d0")
        np.testing.assert_array_equal(back.output(valid), fusion[task].model.output(valid))
        mt = b.load_multi_term(task, "d0")
        np.testing.assert_array_equal(mt.oof, multi[task].oof)
    assert all(a.violations() == 0 for a in b.load_audits())
    with pytest.raises(StageDependencyError):
        b.load_fusion("valence", "other-digest")
