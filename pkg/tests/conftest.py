"""
Shared fixtures
"""
import numpy as np
import pytest

from common import PointCloud, SceneLabels
from data.scene_generator import SynthClass, SynthConfig
from data.semantic_scheme import CYCLIST_LIKE, PEDESTRIAN_LIKE, VEHICLE_LIKE, synthetic_scheme


@pytest.fixture
def scheme():
    return synthetic_scheme()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_synth_config():
    """A few instances per scene, light background"""
    return SynthConfig(
        seed=7,
        classes=(
            SynthClass(VEHICLE_LIKE, 'vehicle-like', (3.5, 5.0), 2, (1.0, 0.42, 0.33)),
            SynthClass(CYCLIST_LIKE, 'cyclist-like', (1.5, 2.0), 1, (1.0, 0.35, 0.9)),
            SynthClass(PEDESTRIAN_LIKE, 'pedestrian-like', (0.4, 0.8), 2, (1.0, 1.0, 2.8)),
        ),
        distance_range=(5.0, 20.0),
        ground_points=200,
        building_walls=1,
        wall_points=100,
        clutter_points=10,
    )


def make_blobs(rng, centers, per_blob=40, spread=0.1):
    """Gaussian blobs around the given centers with their blob index per point"""
    centers = np.asarray(centers, dtype=np.float64)
    points = np.vstack([c + rng.normal(scale=spread, size=(per_blob, 3)) for c in centers])
    labels = np.repeat(np.arange(1, len(centers) + 1), per_blob)
    return points, labels


def same_partition(a, b):
    """Equal up to renaming of cluster ids, with 0 fixed"""
    a = np.asarray(a)
    b = np.asarray(b)
    if not np.array_equal(a == 0, b == 0):
        return False
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


@pytest.fixture
def two_blobs(rng):
    return make_blobs(rng, [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])


@pytest.fixture
def tiny_scene():
    """Six points: a vehicle (id 1), a pedestrian (id 2) and road"""
    cloud = PointCloud(
        points=[[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 0], [5, 5, 2], [9, 9, 0]],
        intensity=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
    )
    labels = SceneLabels(semantic=[10, 10, 10, 30, 30, 40], instance=[1, 1, 1, 2, 2, 0])
    return cloud, labels
