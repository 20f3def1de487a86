import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lidarsim.geometry import CameraIntrinsics, RigidTransform


@pytest.fixture
def cam100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def random_transform(rng, scale=10.0):
    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    return RigidTransform(rot, rng.uniform(-scale, scale, 3))


@pytest.fixture(scope="session")
def street_box(tmp_path_factory):
    from lidarsim.fixtures import synth_fixture

    return synth_fixture("street-box", tmp_path_factory.mktemp("street"), n_frames=2)


@pytest.fixture(scope="session")
def five_sensor(tmp_path_factory):
    from lidarsim.fixtures import synth_fixture

    return synth_fixture("five-sensor", tmp_path_factory.mktemp("five"), n_frames=1)
