import sys

import pytest

from klfusion.pipeline import KlSettings, PipelineConfig, compute_features
from klfusion.synth import default_scene, generate


@pytest.fixture(scope="session")
def small_scene():
    spec = default_scene(seed=11, size=40, n_polygons=5, radius=(4.0, 7.0))
    return spec, generate(spec)


@pytest.fixture(scope="session")
def small_features(small_scene):
    _, (training, optical, sar, truth) = small_scene
    config = PipelineConfig(kl=KlSettings(tile_rows=40, tile_cols=40))
    return config, compute_features(config, training, optical, sar), truth


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
