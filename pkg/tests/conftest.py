import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tcreloc.synthscene import SceneConfig, generate_scene, make_triplet  # noqa: E402

SMALL = dict(width=160, height=96, baseline=(0.25, 1.25), query_translation=0.5, query_rotation=np.deg2rad(5.0))


@pytest.fixture(scope="session")
def small_cfg():
    return SceneConfig(**SMALL)


@pytest.fixture(scope="session")
def static_triplet(small_cfg):
    scene = generate_scene(small_cfg, seed=3)
    return make_triplet(scene, small_cfg, seed=1003)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
