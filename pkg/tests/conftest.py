import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from keyrender.geometry import CameraPose, Intrinsics, Quaternion, Trajectory
from keyrender.synth import generate_scene, generate_trajectory

settings.register_profile("keyrender", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("keyrender")


def random_rotation(rng):
    q = rng.normal(size=4)
    return Quaternion.from_array(q / np.linalg.norm(q))


def random_poses(rng, n, spread=3.0, intrinsics=None):
    K = intrinsics or Intrinsics(100.0, 100.0, 64.0, 64.0)
    return [CameraPose(random_rotation(rng), rng.normal(scale=spread, size=3), K) for _ in range(n)]


@pytest.fixture(scope="session")
def small_room():
    return generate_scene("room", 0, budget=12_000)


@pytest.fixture(scope="session")
def small_orbit(small_room):
    return generate_trajectory("orbit", 4.0, 10.0, 0, small_room.bounds, resolution=(96, 96))
