import numpy as np
import pytest

from hlnet.model import HlnConfig, HlnModel
from hlnet.relationship import frequency_bias_table, frequency_counts
from hlnet.scenes import DatasetConfig, detector_rng, generate_dataset, simulate_detector


@pytest.fixture(scope="session")
def small_data():
    return DatasetConfig(seed=3, n_scenes=40, d_v=6, d_emb=8)


@pytest.fixture(scope="session")
def small_scenes(small_data):
    return generate_dataset(small_data)


@pytest.fixture
def small_scene_detections(small_data, small_scenes):
    scene = small_scenes[0]
    return simulate_detector(scene, detector_rng(small_data, scene), small_data)


def make_model(data, preset="hln", dim=8, heads=2, seed=0, scenes=None, **kw):
    cfg = HlnConfig.from_preset(preset, dim=dim, heads=heads, d_emb=data.d_emb, **kw)
    model = HlnModel(cfg, data.n_categories, data.n_predicates, data.d_v, seed=seed)
    if scenes is not None:
        model.set_frequency_bias(frequency_bias_table(frequency_counts(scenes, data.n_categories, data.n_predicates)))
    return model


def scene_with_n(scenes, n):
    for s in scenes:
        if s.n_objects == n:
            return s
    raise LookupError(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
