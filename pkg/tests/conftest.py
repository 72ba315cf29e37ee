import numpy as np
import pytest

from objslam.geometry import CameraIntrinsics, Ellipsoid, look_at
from objslam.pipeline import Config
from objslam.pipeline.runner import train_vocabularies
from objslam.simulator import generate, preset, random_rotation

K_TEST = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_ellipsoid(rng, center_scale=0.3, axes=(0.1, 0.5)):
    return Ellipsoid(random_rotation(rng), rng.uniform(-center_scale, center_scale, 3),
                     rng.uniform(*axes, 3))


def random_view(rng, target, dist=(3.0, 6.0)):
    """Camera somewhere on a sphere around ``target``, looking roughly at it."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    eye = np.asarray(target) + rng.uniform(*dist) * d
    return look_at(eye, np.asarray(target) + rng.normal(0, 0.05, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab_train():
    return generate(preset("vocab-train"))


@pytest.fixture(scope="session")
def vocabularies(vocab_train):
    return train_vocabularies(vocab_train.frames, range(4))


@pytest.fixture(scope="session")
def desk_easy():
    return generate(preset("desk-easy"))


@pytest.fixture(scope="session")
def desk_hard():
    return generate(preset("desk-hard"))


@pytest.fixture(scope="session")
def sync_config():
    return Config(ba_sync=True)


# acceptance summary ----------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
