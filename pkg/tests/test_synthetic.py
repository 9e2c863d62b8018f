import filecmp

import numpy as np

from mtfusion.data import load_labels
from mtfusion.metrics import ccc
from mtfusion.synthetic import (LATENT_NAMES, SyntheticSpec, expression_from_va, generate,
                                neutral_radius, ou_walk, write_corpus)


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_byte_identical_corpora(tmp_path):
    spec = SyntheticSpec(videos=20, valid_videos=4, duration=60, fps=10, seed=7)
    a = write_corpus(spec, tmp_path / "a")
    b = write_corpus(spec, tmp_path / "b")
    assert tree_equal(a, b)
    c = write_corpus(SyntheticSpec(videos=20, valid_videos=4, duration=60, fps=10, seed=8),
                     tmp_path / "c")
    assert not tree_equal(a, c)


def test_neutral_fraction_dominant():
    spec = SyntheticSpec(videos=20, valid_videos=0, duration=60, fps=10, seed=7)
    labels = np.concatenate([seq.labels["expression"].values for seq, _, _ in generate(spec)])
    assert np.mean(labels == 0) > 0.6
    assert set(np.unique(labels)) == set(range(7))


def test_latent_oracle_recovers_valence(tmp_path):
    out = write_corpus(SyntheticSpec(videos=6, valid_videos=2, duration=60, fps=10, seed=7),
                       tmp_path / "c")
    lat, val = [], []
    for vdir in sorted(p for p in out.iterdir() if p.is_dir()):
        lat.append(np.loadtxt(vdir / "latents.csv", delimiter=",", skiprows=1))
        val.append(load_labels(vdir / "valence.csv", "valence").values)
    lat, val = np.vstack(lat), np.concatenate(val)
    # least squares on the first four videos, scored on the last two
    n_fit = 4 * 600
    x = np.column_stack([lat, np.ones(len(lat))])
    coef, *_ = np.linalg.lstsq(x[:n_fit], val[:n_fit], rcond=None)
    assert ccc(val[n_fit:], x[n_fit:] @ coef) > 0.9
    assert lat.shape[1] == len(LATENT_NAMES)


def test_ou_walk_time_scales():
    rng = np.random.default_rng(0)
    lag = 10   # 1 s at 10 fps
    ac = []
    for tau in (1.0, 6.0, 12.0):
        x = ou_walk(rng, 200_000, 0.1, tau)
        ac.append(np.corrcoef(x[:-lag], x[lag:])[0, 1])
        assert abs(np.var(x) - 1) < 0.1
    np.testing.assert_allclose(ac, np.exp(-1 / np.array([1.0, 6.0, 12.0])), atol=0.03)


def test_expression_sectors():
    r = neutral_radius(0.68)
    assert expression_from_va(np.array([0.0]), np.array([0.0]), r)[0] == 0
    angles = np.linspace(-np.pi + 1e-6, np.pi - 1e-6, 600)
    cls = expression_from_va(np.cos(angles), np.sin(angles), r)
    assert set(cls) == {1, 2, 3, 4, 5, 6}
    assert np.all(np.diff(cls) >= 0)


def test_splits_and_labels_in_range():
    spec = SyntheticSpec(videos=5, valid_videos=2, duration=20, fps=5, seed=1)
    rows = list(generate(spec))
    assert [s for _, _, s in rows] == ["train"] * 3 + ["valid"] * 2
    for seq, _, _ in rows:
        for task in ("valence", "arousal"):
            v = seq.labels[task].values
            assert np.all((v >= -1) & (v <= 1))
        assert set(seq.features) == set(spec.dims)
        assert len(seq.timestamps) == 100
