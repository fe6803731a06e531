from pathlib import Path

import pytest

from xlctsim.config import parse_config

REPO_ROOT = Path(__file__).resolve().parent.parent
DEMO_CONFIG = REPO_ROOT / "configs" / "demo.yaml"

# Small enough to run a full pipeline in well under a second.
TINY = {
    "phantom": {
        "diameter": 3.2, "height": 0.2, "voxel_size": 0.2,
        "background_concentration": 0.02,
        "targets": [{"center": [0.6, 0.0, 0.0], "radius": 0.3,
                     "height": 0.2, "concentration": 1.0}],
    },
    "protocol": {
        "fov": 3.4, "n_angles": 3, "stage_speed": 5.0, "bin_time": 0.04,
        "slices": [0.0], "beam_fwhm": 0.3, "quadrature_q": 2,
    },
    "detectors": {"count": 4, "ring_radius": 2.5},
    "source": {"count_scale": 100000.0},
    "solver": {"algorithm": "mlem", "max_iters": 20},
    "seed": 11,
}


@pytest.fixture
def tiny_config():
    return parse_config(TINY)


@pytest.fixture
def tiny_raw():
    import copy
    return copy.deepcopy(TINY)


@pytest.fixture
def demo_config_path():
    return DEMO_CONFIG
