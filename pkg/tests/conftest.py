import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtfusion.data import TASKS
from mtfusion.windowing import WindowedDataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_windowed(rng, n_videos=4, per_video=30, groups=None, terms=None, tasks=TASKS):
    """Small windowed dataset with random features and labels (no extraction involved)."""
    groups = groups or {"au_intensity": 2, "gaze": 1}
    terms = terms or {"short": 1.0, "middle": 6.0, "long": 12.0}
    n = n_videos * per_video
    vids = np.array([f"v{i:02d}" for i in range(n_videos) for _ in range(per_video)],
                    dtype=object)
    anchors = np.tile(12.0 + 0.2 * np.arange(per_video), n_videos)
    feats = {t: {g: rng.normal(size=(n, 4 * d)) for g, d in groups.items()} for t in terms}
    labels = {}
    for t in terms:
        labels[t] = {}
        for task in tasks:
            if task == "expression":
                labels[t][task] = rng.integers(0, 7, size=n).astype(np.int64)
            else:
                labels[t][task] = rng.uniform(-1, 1, size=n)
    return WindowedDataset(vids, anchors, dict(terms), dict(groups), tuple(tasks), feats, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
