import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY = dict(template_level=2, psi_hidden=8, psi_layers=2, fit_steps=5, image_size=32, stride=4, texture_size=16,
            feature_dim=8, extractor_channels="4,8", n_pos=16, n_neg=32, n_class_neg=8, bg_capacity=32,
            bg_per_image=4, batch_size=4, inf_steps=5, init_azimuths=4, init_elevations=2, init_thetas=1)


@pytest.fixture(scope="session")
def tiny_geometry():
    from texmesh.config import desk_config
    from texmesh.model import builtin_geometry

    cfg = desk_config(**TINY)
    return cfg, builtin_geometry(cfg)


@pytest.fixture
def tiny_setup(tiny_geometry):
    """Fresh tiny model plus a 9-image synthetic dataset."""
    from texmesh.model import TexturedMeshModel
    from texmesh.synth import synth_gen

    cfg, geo = tiny_geometry
    model = TexturedMeshModel(cfg, geo)
    model.init_appearance()
    return model, synth_gen(cfg, 0, n_per_class=3)


# --------------------------------------------------------------------------- acceptance report

_CRITERIA: dict[str, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.setdefault(marker.args[0], []).append("PASS" if rep.passed else
                                                        "SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, results in _CRITERIA.items():
        status = "FAIL" if "FAIL" in results else "SKIP" if "SKIP" in results else "PASS"
        terminalreporter.write_line(f"{status}  {name}  ({results.count('PASS')}/{len(results)} checks)")
