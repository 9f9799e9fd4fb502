"""
Tests for BFS, DBSCAN and mean shift
"""
import numpy as np
import pytest
from sklearn.cluster import DBSCAN

from clustering.heuristic import bfs_cluster, dbscan, mean_shift, relabel_first_touch
from tests.conftest import make_blobs, same_partition


def test_relabel_first_touch():
    assignment = relabel_first_touch(np.array([7, 7, 3, 9, 3]))
    assert assignment.labels.tolist() == [1, 1, 2, 3, 2]
    assert assignment.num_clusters == 3

    masked = relabel_first_touch(np.array([5, 2, 5, 2]), np.array([False, True, True, True]))
    assert masked.labels.tolist() == [0, 1, 2, 1]


class TestBFS:

    def test_two_blobs(self, two_blobs):
        points, truth = two_blobs
        assignment = bfs_cluster(points, 1.0)
        assert assignment.num_clusters == 2
        assert same_partition(assignment.labels, truth)

    def test_chain_links_transitively(self):
        points = np.array([[0, 0, 0], [0.9, 0, 0], [1.8, 0, 0], [5, 0, 0]], dtype=float)
        assert bfs_cluster(points, 1.0).labels.tolist() == [1, 1, 1, 2]

    def test_every_point_assigned(self, rng):
        points = rng.uniform(0, 20, size=(300, 3))
        assignment = bfs_cluster(points, 0.5)
        assert np.all(assignment.labels > 0)
        assert assignment.labels.max() == assignment.num_clusters

    def test_empty_and_invalid(self):
        assert len(bfs_cluster(np.zeros((0, 3)), 1.0)) == 0
        with pytest.raises(ValueError):
            bfs_cluster(np.zeros((3, 3)), 0.0)


class TestDBSCAN:

    def test_matches_sklearn_on_separated_blobs(self, rng):
        points, _ = make_blobs(rng, [[0, 0, 0], [8, 0, 0], [0, 8, 3]], per_blob=60, spread=0.2)
        outliers = rng.uniform(20, 40, size=(5, 3)) * rng.choice([-1, 1], size=(5, 3))
        points = np.vstack([points, outliers])

        ours = dbscan(points, eps=0.6, min_pts=5)
        reference = DBSCAN(eps=0.6, min_samples=5).fit_predict(points) + 1
        assert same_partition(ours.labels, reference)
        assert np.all(ours.labels[-5:] == 0)

    def test_border_point_joins_lowest_index_core(self):
        # The border point at x = 3.4 reaches a core of each group
        xs = [0.0, 0.5, 1.0, 1.5, 3.4, 5.3, 5.8, 6.3, 6.8]
        points = np.column_stack([xs, np.zeros(9), np.zeros(9)])
        assignment = dbscan(points, eps=2.0, min_pts=4)
        assert assignment.num_clusters == 2
        assert assignment.labels[4] == assignment.labels[3]
        assert assignment.labels[4] != assignment.labels[5]

    def test_min_pts_one_has_no_noise(self, rng):
        points = rng.uniform(0, 10, size=(50, 3))
        assignment = dbscan(points, eps=0.1, min_pts=1)
        assert np.all(assignment.labels > 0)
        assert same_partition(assignment.labels, bfs_cluster(points, 0.1).labels)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            dbscan(np.zeros((3, 3)), eps=-1.0, min_pts=2)
        with pytest.raises(ValueError):
            dbscan(np.zeros((3, 3)), eps=1.0, min_pts=0)


class TestMeanShift:

    def test_two_blobs(self, two_blobs):
        points, truth = two_blobs
        assignment, modes = mean_shift(points, bandwidth=1.0)
        assert assignment.num_clusters == 2
        assert same_partition(assignment.labels, truth)
        assert len(modes) == 2
        assert modes.counts.tolist() == [40, 40]
        for k in range(2):
            members = points[assignment.labels == k + 1]
            assert np.linalg.norm(modes.modes[k] - members.mean(axis=0)) < 0.2

    def test_with_fps_seeds(self, two_blobs):
        points, truth = two_blobs
        assignment, _ = mean_shift(points, bandwidth=1.0, seed_count=10, seed=3)
        assert same_partition(assignment.labels, truth)

    def test_small_bandwidth_oversegments(self, rng):
        points, _ = make_blobs(rng, [[0, 0, 0]], per_blob=100, spread=1.0)
        assignment, _ = mean_shift(points, bandwidth=0.2)
        assert assignment.num_clusters > 1

    def test_large_bandwidth_merges(self, rng):
        points, _ = make_blobs(rng, [[0, 0, 0], [3, 0, 0]], per_blob=50, spread=0.2)
        assignment, _ = mean_shift(points, bandwidth=10.0)
        assert assignment.num_clusters == 1

    def test_deterministic(self, two_blobs):
        points, _ = two_blobs
        first, _ = mean_shift(points, bandwidth=0.8, seed_count=15, seed=2)
        second, _ = mean_shift(points, bandwidth=0.8, seed_count=15, seed=2)
        assert np.array_equal(first.labels, second.labels)

    def test_empty_and_invalid(self):
        assignment, modes = mean_shift(np.zeros((0, 3)), bandwidth=1.0)
        assert len(assignment) == 0 and len(modes) == 0
        with pytest.raises(ValueError):
            mean_shift(np.zeros((2, 3)), bandwidth=0.0)
        with pytest.raises(ValueError):
            mean_shift(np.zeros((2, 3)), bandwidth=1.0, max_iters=0)


class TestTranslation:

    OFFSET = np.array([100.25, -37.5, 3.0])

    @pytest.fixture
    def scene(self, rng):
        points, _ = make_blobs(rng, [[0, 0, 0], [6, 0, 0], [0, 6, 1], [6, 6, 0]], per_blob=30, spread=0.4)
        return points

    @pytest.mark.parametrize('cluster', [
        lambda p: bfs_cluster(p, 1.0),
        lambda p: dbscan(p, 0.8, 4),
        lambda p: mean_shift(p, 1.5, seed_count=40, seed=2)[0],
    ], ids=['bfs', 'dbscan', 'meanshift'])
    def test_partition_unchanged_by_translation(self, scene, cluster):
        base = cluster(scene)
        moved = cluster(scene + self.OFFSET)
        assert base.num_clusters == moved.num_clusters
        assert same_partition(base.labels, moved.labels)

    def test_mean_shift_modes_move_with_the_points(self, scene):
        _, modes = mean_shift(scene, 1.5)
        _, moved = mean_shift(scene + self.OFFSET, 1.5)
        assert np.allclose(moved.modes, modes.modes + self.OFFSET, rtol=0.0, atol=1e-9)
