"""
Tests for dynamic shifting: kernels, iterations, forward pass and gradients
"""
import math

import numpy as np
import pytest

from clustering.dynamic_shifting import (BandwidthBank, FinalClusterConfig, IterationSchedule, assign_from_seeds,
                                         candidate_targets, ds_backward, ds_forward, ds_iteration, ds_loss,
                                         effective_bandwidths, flat_kernel_shift, gaussian_direct_shift,
                                         gaussian_kernel_shift, replay_losses, shift_seeds, weight_head_forward)
from clustering.heuristic import mean_shift
from clustering.spatial_index import fps
from clustering.weight_head import build_head
from data.scene_generator import gen_scene
from errors import ConfigurationError, ShapeMismatchError
from tests.conftest import make_blobs, same_partition

BANK = BandwidthBank((0.2, 1.7, 3.2))


def brute_flat_shift(X, bandwidth):
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    inside = d2 <= bandwidth * bandwidth
    return (inside.astype(float) @ X) / inside.sum(axis=1, keepdims=True)


def loop_weights(head, features):
    """Softmax head output one row and one unit at a time"""
    rows = []
    last = len(head.weights) - 1
    for f in features:
        a = [(f[k] - head.input_mean[k]) / head.input_scale[k] for k in range(len(f))]
        for layer, (weight, bias) in enumerate(zip(head.weights, head.biases)):
            z = [bias[o] + sum(a[i] * weight[i, o] for i in range(len(a))) for o in range(len(bias))]
            a = z if layer == last else [max(v, 0.0) for v in z]
        top = max(a)
        e = [math.exp(v - top) for v in a]
        rows.append([v / sum(e) for v in e])
    return np.array(rows)


def random_case(rng, direct=False, iterations=None, step_scale=1.0):
    num_seeds = int(rng.integers(4, 33))
    feature_dim = int(rng.integers(2, 9))
    iterations = iterations or int(rng.integers(1, 4))
    centers = rng.uniform(-3, 3, size=(3, 3))
    owner = rng.integers(0, 3, size=num_seeds)
    X0 = centers[owner] + rng.normal(scale=0.8, size=(num_seeds, 3))
    features = rng.normal(size=(num_seeds, feature_dim))
    head = build_head('direct' if direct else 'weighted', feature_dim, len(BANK), hidden_sizes=(6,),
                      seed=int(rng.integers(1000)))
    schedule = IterationSchedule(iterations, step_scale=step_scale,
                                 loss_weights=tuple(rng.uniform(0.5, 1.5, size=iterations)))
    trace = shift_seeds(X0, features, X0, schedule, BANK, head, seed_count=num_seeds)
    return trace, features, head, schedule, centers[owner][trace.seed_index]


def near_kink(trace, features, head, gt, margin=1e-4):
    """ReLU inputs or L1 residuals too close to zero for central differences"""
    _, cache = head.forward(features)
    if any(np.min(np.abs(z)) < margin for z in cache.pre_activations[:-1]):
        return True
    return any(np.min(np.abs(X - gt)) < margin for X in trace.positions[1:])


def numeric_gradient(cost, array, step=1e-5):
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + step
        plus = cost()
        array[idx] = original - step
        minus = cost()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


class TestKernels:

    def test_flat_kernel_matches_brute_force(self, rng):
        for _ in range(20):
            X = rng.uniform(-2, 2, size=(int(rng.integers(1, 60)), 3))
            bandwidth = float(rng.uniform(0.1, 3.0))
            assert np.allclose(flat_kernel_shift(X, bandwidth), brute_flat_shift(X, bandwidth), atol=1e-12)

    def test_flat_kernel_isolated_seed_stays(self):
        X = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        assert np.array_equal(flat_kernel_shift(X, 1.0), X)

    def test_flat_kernel_invalid_bandwidth(self):
        with pytest.raises(ValueError):
            flat_kernel_shift(np.zeros((2, 3)), 0.0)

    def test_candidate_targets_shape(self, rng):
        X = rng.normal(size=(10, 3))
        targets = candidate_targets(X, BANK)
        assert targets.shape == (3, 10, 3)
        assert np.allclose(targets[1], brute_flat_shift(X, 1.7))

    def test_gaussian_kernel_matches_brute_force(self, rng):
        X = rng.normal(size=(25, 3))
        bandwidths = rng.uniform(0.3, 2.0, size=25)
        d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
        kernel = np.exp(-d2 / (2 * bandwidths[:, None] ** 2))
        expected = (kernel @ X) / kernel.sum(axis=1, keepdims=True)
        assert np.allclose(gaussian_kernel_shift(X, bandwidths), expected, atol=1e-12)

    def test_gaussian_direct_shift_uses_head_bandwidths(self, rng):
        X = rng.normal(size=(12, 3))
        features = rng.normal(size=(12, 4))
        head = build_head('direct', 4, 1, hidden_sizes=(5,), seed=2)
        expected = gaussian_kernel_shift(X, head.bandwidths_for(features))
        assert np.array_equal(gaussian_direct_shift(X, features, head), expected)

    def test_effective_bandwidths(self):
        uniform = np.full((4, 3), 1.0 / 3.0)
        assert np.allclose(effective_bandwidths(uniform, BANK), np.mean(BANK.candidates))
        one_hot = np.eye(3)
        assert np.allclose(effective_bandwidths(one_hot, BANK), BANK.candidates)


class TestDegenerateEquivalence:

    def test_single_candidate_equals_flat_mean_shift(self, rng):
        for _ in range(50):
            X = rng.uniform(-3, 3, size=(int(rng.integers(1, 40)), 3))
            bandwidth = float(rng.uniform(0.2, 3.0))
            bank = BandwidthBank((bandwidth,))
            W = np.ones((len(X), 1))
            assert np.allclose(ds_iteration(X, W, bank), brute_flat_shift(X, bandwidth), rtol=0.0, atol=1e-9)

    def test_one_hot_weights_select_a_candidate(self, rng):
        for _ in range(50):
            X = rng.uniform(-3, 3, size=(int(rng.integers(1, 40)), 3))
            j = int(rng.integers(3))
            W = np.zeros((len(X), 3))
            W[:, j] = 1.0
            assert np.allclose(ds_iteration(X, W, BANK), flat_kernel_shift(X, BANK.candidates[j]),
                               rtol=0.0, atol=1e-9)

    def test_iterations_equal_repeated_flat_shifts(self, rng):
        X0 = rng.uniform(-3, 3, size=(30, 3))
        features = rng.normal(size=(30, 4))
        bank = BandwidthBank((1.1,))
        head = build_head('weighted', 4, 1, hidden_sizes=(3,), seed=0)
        trace = shift_seeds(X0, features, X0, IterationSchedule(3), bank, head, seed_count=30)
        expected = X0
        for i in range(1, 4):
            expected = brute_flat_shift(expected, 1.1)
            assert np.allclose(trace.positions[i], expected, rtol=0.0, atol=1e-9)


class TestIteration:

    def test_zero_step_scale_keeps_positions(self, rng):
        X = rng.normal(size=(10, 3))
        W = np.full((10, 3), 1.0 / 3.0)
        assert np.allclose(ds_iteration(X, W, BANK, step_scale=0.0), X)

    def test_half_step(self, rng):
        X = rng.normal(size=(10, 3))
        W = np.full((10, 3), 1.0 / 3.0)
        full = ds_iteration(X, W, BANK)
        assert np.allclose(ds_iteration(X, W, BANK, step_scale=0.5), (X + full) / 2)

    def test_weights_validated(self, rng):
        X = rng.normal(size=(5, 3))
        with pytest.raises(ShapeMismatchError):
            ds_iteration(X, np.full((5, 2), 0.5), BANK)
        with pytest.raises(ValueError):
            ds_iteration(X, np.full((5, 3), 0.5), BANK)

    def test_invalid_bank_and_schedule(self):
        with pytest.raises(ConfigurationError):
            BandwidthBank((1.0, 0.5))
        with pytest.raises(ConfigurationError):
            BandwidthBank(())
        with pytest.raises(ConfigurationError):
            IterationSchedule(0)
        with pytest.raises(ConfigurationError):
            IterationSchedule(2, loss_weights=(1.0,))


class TestForward:

    def test_shift_seeds_records_trace(self, rng):
        trace, features, head, schedule, gt = random_case(rng, iterations=3)
        assert trace.iterations == 3
        assert len(trace.weights) == len(trace.targets) == 3
        assert all(np.allclose(W.sum(axis=1), 1.0) for W in trace.weights)
        bandwidths = trace.effective_bandwidths(BANK)
        assert len(bandwidths) == 3
        assert all(np.all((b >= 0.2) & (b <= 3.2)) for b in bandwidths)

    def test_direct_trace_bandwidths(self, rng):
        trace, *_ = random_case(rng, direct=True, iterations=2)
        assert trace.head_kind == 'direct'
        assert len(trace.bandwidths) == 2
        assert np.array_equal(trace.effective_bandwidths()[0], trace.bandwidths[0])

    def test_seed_count_limits_seeds(self, rng):
        points = rng.normal(size=(100, 3))
        head = build_head('weighted', 2, 3, hidden_sizes=(4,))
        trace = shift_seeds(points, rng.normal(size=(100, 2)), points, IterationSchedule(1), BANK, head, seed_count=10)
        assert trace.num_seeds == 10
        assert len(np.unique(trace.seed_index)) == 10

    def test_misaligned_inputs(self, rng):
        head = build_head('weighted', 2, 3, hidden_sizes=(4,))
        with pytest.raises(ShapeMismatchError):
            shift_seeds(np.zeros((5, 3)), np.zeros((4, 2)), np.zeros((5, 3)), IterationSchedule(1), BANK, head)
        narrow = build_head('weighted', 2, 2, hidden_sizes=(4,))
        with pytest.raises(ShapeMismatchError):
            shift_seeds(np.zeros((5, 3)), np.zeros((5, 2)), np.zeros((5, 3)), IterationSchedule(1), BANK, narrow)

    def test_ds_forward_separates_blobs(self, rng):
        points, truth = make_blobs(rng, [[0, 0, 0], [8, 0, 0], [0, 8, 0]], per_blob=60, spread=0.3)
        head = build_head('weighted', 4, 3, hidden_sizes=(8,), zero_init=True)
        config = FinalClusterConfig(min_instance_points=5)
        assignment, trace = ds_forward(points, rng.normal(size=(len(points), 4)), points, IterationSchedule(4),
                                       BANK, head, config, seed_count=50, seed=1)
        assert assignment.num_clusters == 3
        assert len(assignment) == len(points)
        for k in range(1, 4):
            assert len(np.unique(truth[assignment.labels == k])) == 1

    def test_ds_forward_bfs_finalizer(self, rng):
        points, _ = make_blobs(rng, [[0, 0, 0], [8, 0, 0]], per_blob=40, spread=0.2)
        head = build_head('weighted', 3, 3, hidden_sizes=(4,), zero_init=True)
        config = FinalClusterConfig(algorithm='bfs', radius=1.0, min_instance_points=0)
        assignment, _ = ds_forward(points, np.zeros((80, 3)), points, IterationSchedule(2), BANK, head, config)
        assert assignment.num_clusters == 2

    def test_ds_forward_is_deterministic(self, rng):
        points, _ = make_blobs(rng, [[0, 0, 0], [5, 0, 0]], per_blob=40)
        features = rng.normal(size=(80, 3))
        head = build_head('weighted', 3, 3, hidden_sizes=(4,), seed=4)
        first, _ = ds_forward(points, features, points, IterationSchedule(), BANK, head, seed_count=20, seed=3)
        second, _ = ds_forward(points, features, points, IterationSchedule(), BANK, head, seed_count=20, seed=3)
        assert np.array_equal(first.labels, second.labels)

    def test_ds_forward_empty(self):
        head = build_head('weighted', 3, 3, hidden_sizes=(4,))
        assignment, trace = ds_forward(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), IterationSchedule(),
                                       BANK, head)
        assert len(assignment) == 0 and assignment.num_clusters == 0
        assert trace.num_seeds == 0

    def test_assign_from_seeds_drops_small_clusters(self):
        points = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [9, 0, 0]], dtype=float)
        assignment = assign_from_seeds(points, np.array([0, 3]), np.array([1, 2]), min_instance_points=2)
        assert assignment.labels.tolist() == [1, 1, 1, 0]
        assert assignment.num_clusters == 1


class TestLoss:

    def test_loss_values(self):
        X0 = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        head = build_head('weighted', 1, 1, hidden_sizes=(2,))
        trace = shift_seeds(X0, np.zeros((2, 1)), X0, IterationSchedule(2, loss_weights=(1.0, 2.0)),
                            BandwidthBank((0.5,)), head, seed_count=2)
        gt = np.array([[1.0, 1, 0], [10.0, 0, 1]])[trace.seed_index]
        report = ds_loss(trace, gt, IterationSchedule(2, loss_weights=(1.0, 2.0)))
        assert report.per_iteration == (1.5, 1.5)
        assert report.total == pytest.approx(4.5)

    def test_loss_needs_seeds_and_alignment(self, rng):
        trace, features, head, schedule, gt = random_case(rng, iterations=1)
        with pytest.raises(ShapeMismatchError):
            ds_loss(trace, gt[:-1], schedule)
        empty = shift_seeds(np.zeros((0, 3)), np.zeros((0, features.shape[1])), np.zeros((0, 3)), schedule, BANK,
                            head)
        with pytest.raises(ValueError):
            ds_loss(empty, np.zeros((0, 3)), schedule)

    def test_replay_reproduces_forward_losses(self, rng):
        trace, features, head, schedule, gt = random_case(rng, iterations=3)
        forward = ds_loss(trace, gt, schedule)
        replayed = replay_losses(trace, features, head, BANK, gt, schedule)
        assert np.allclose(forward.per_iteration, replayed.per_iteration, rtol=0.0, atol=1e-12)


class TestGradients:

    def _check_case(self, trace, features, head, schedule, gt):
        grads = ds_backward(trace, features, head, BANK, gt, schedule)

        def cost():
            return replay_losses(trace, features, head, BANK, gt, schedule).total

        for name, param in head.parameters().items():
            np.testing.assert_allclose(grads.parameters[name], numeric_gradient(cost, param),
                                       rtol=1e-4, atol=1e-7, err_msg=name)
        np.testing.assert_allclose(grads.features, numeric_gradient(cost, features), rtol=1e-4, atol=1e-7)

    def _accepted_cases(self, rng, count, **kwargs):
        cases = []
        while len(cases) < count:
            case = random_case(rng, **kwargs)
            trace, features, head, _, gt = case
            if not near_kink(trace, features, head, gt):
                cases.append(case)
        return cases

    def test_weighted_head_matches_finite_differences(self, rng):
        for case in self._accepted_cases(rng, 20):
            self._check_case(*case)

    def test_partial_step_matches_finite_differences(self, rng):
        for case in self._accepted_cases(rng, 3, step_scale=0.5):
            self._check_case(*case)

    def test_direct_head_matches_finite_differences(self, rng):
        for case in self._accepted_cases(rng, 5, direct=True):
            self._check_case(*case)

    def test_upstream_scales_gradients(self, rng):
        trace, features, head, schedule, gt = self._accepted_cases(rng, 1)[0]
        base = ds_backward(trace, features, head, BANK, gt, schedule)
        scaled = ds_backward(trace, features, head, BANK, gt, schedule, upstream=2.5)
        for name in base.parameters:
            assert np.allclose(scaled.parameters[name], 2.5 * base.parameters[name])

    def test_loss_of_an_iteration_sees_only_its_own_head(self, rng):
        trace, features, head, schedule, gt = random_case(rng, iterations=3)
        heads = [head.copy() for _ in range(3)]
        base = replay_losses(trace, features, heads, BANK, gt, schedule).per_iteration

        heads[1].biases[-1] = heads[1].biases[-1] + np.array([0.5, -0.5, 0.0])
        changed = replay_losses(trace, features, heads, BANK, gt, schedule).per_iteration
        assert changed[0] == base[0]
        assert changed[2] == base[2]
        assert changed[1] != base[1]

    def test_first_iteration_gradient_ignores_later_iterations(self, rng):
        trace, features, head, _, gt = random_case(rng, iterations=3)
        only_first = IterationSchedule(3, loss_weights=(1.0, 0.0, 0.0))
        grads = ds_backward(trace, features, head, BANK, gt, only_first)

        X0 = trace.positions[0]
        short = shift_seeds(X0, features, X0, IterationSchedule(1), BANK, head, seed_count=len(X0))
        expected = ds_backward(short, features, head, BANK, gt, IterationSchedule(1))
        for name in grads.parameters:
            assert np.allclose(grads.parameters[name], expected.parameters[name], rtol=0.0, atol=1e-12)

    def test_head_kind_must_match_trace(self, rng):
        trace, features, head, schedule, gt = random_case(rng, iterations=1)
        direct = build_head('direct', features.shape[1], 3, hidden_sizes=(6,))
        with pytest.raises(ShapeMismatchError):
            ds_backward(trace, features, direct, BANK, gt, schedule)

    def test_head_width_must_match_bank(self, rng):
        trace, features, _, schedule, gt = random_case(rng, iterations=1)
        narrow = build_head('weighted', features.shape[1], 2, hidden_sizes=(6,))
        with pytest.raises(ShapeMismatchError, match='2 weights for 3 candidates'):
            ds_backward(trace, features, narrow, BANK, gt, schedule)

    def test_identical_candidate_targets_give_zero_gradient(self, rng):
        points, owner = make_blobs(rng, [[0, 0, 0], [10, 0, 0]], per_blob=15, spread=0.05)
        bank = BandwidthBank((1.0, 2.0))
        head = build_head('weighted', 3, 2, hidden_sizes=(4,), zero_init=True)
        features = rng.normal(size=(len(points), 3))
        schedule = IterationSchedule(2)
        trace = shift_seeds(points, features, points, schedule, bank, head, seed_count=len(points))
        assert np.allclose(trace.targets[0][0], trace.targets[0][1], rtol=0.0, atol=1e-12)

        gt = np.array([[0.3, 0.0, 0.0], [10.3, 0.0, 0.0]])[owner - 1][trace.seed_index]
        grads = ds_backward(trace, features, head, bank, gt, schedule)
        last = len(head.weights) - 1
        assert np.allclose(grads.parameters[f'W{last}'], 0.0, atol=1e-12)
        assert np.allclose(grads.parameters[f'b{last}'], 0.0, atol=1e-12)


class TestWeightHeadForward:

    def test_matches_a_row_by_row_loop(self, rng):
        head = build_head('weighted', 5, 3, hidden_sizes=(6, 4), seed=9)
        head.fit_normalizer(rng.normal(loc=1.0, size=(20, 5)))
        features = rng.normal(size=(8, 5))
        assert np.allclose(weight_head_forward(features, head), loop_weights(head, features), rtol=0.0, atol=1e-12)

    def test_dominant_logit(self):
        head = build_head('weighted', 3, 3, hidden_sizes=(4,), zero_init=True)
        head.biases[-1] = np.array([10.0, 0.0, 0.0])
        W = weight_head_forward(np.zeros((2, 3)), head)
        top = 1.0 / (1.0 + 2.0 * math.exp(-10.0))
        assert W[0, 0] == pytest.approx(top, rel=1e-12)
        assert W[0, 1] == pytest.approx(math.exp(-10.0) * top, rel=1e-9)
        assert W[0, 0] > 0.9999
        assert np.allclose(W.sum(axis=1), 1.0)


class TestInvariants:

    OFFSET = np.array([100.25, -37.5, 3.0])

    def test_translation_moves_every_iteration_and_keeps_the_partition(self, rng):
        blob_centers = np.array([[0.0, 0, 0], [7.0, 0, 0], [0.0, 7, 0]])
        points, owner = make_blobs(rng, blob_centers, per_blob=50, spread=0.5)
        true_centers = blob_centers[owner - 1]
        C = true_centers + rng.normal(scale=0.2, size=points.shape)
        F = rng.normal(size=(len(points), 4))
        head = build_head('weighted', 4, 3, hidden_sizes=(8,), seed=6)
        config = FinalClusterConfig(min_instance_points=5)
        schedule = IterationSchedule(3)

        base, trace = ds_forward(points, F, C, schedule, BANK, head, config, seed_count=60, seed=2)
        moved, moved_trace = ds_forward(points + self.OFFSET, F, C + self.OFFSET, schedule, BANK, head, config,
                                        seed_count=60, seed=2)
        assert np.array_equal(trace.seed_index, moved_trace.seed_index)
        for X, Y in zip(trace.positions, moved_trace.positions):
            assert np.allclose(Y, X + self.OFFSET, rtol=0.0, atol=1e-9)
        assert base.num_clusters == moved.num_clusters
        assert same_partition(base.labels, moved.labels)

        loss = ds_loss(trace, true_centers[trace.seed_index], schedule)
        moved_loss = ds_loss(moved_trace, true_centers[moved_trace.seed_index] + self.OFFSET, schedule)
        assert moved_loss.per_iteration == pytest.approx(loss.per_iteration, abs=1e-9)

    def test_zero_head_averages_the_candidate_targets(self, rng):
        X0 = rng.uniform(-3, 3, size=(30, 3))
        head = build_head('weighted', 4, 3, hidden_sizes=(5,), zero_init=True)
        _, trace = ds_forward(X0, rng.normal(size=(30, 4)), X0, IterationSchedule(1), BANK, head,
                              FinalClusterConfig(min_instance_points=0), seed_count=30)
        start = X0[trace.seed_index]
        expected = np.mean([flat_kernel_shift(start, b) for b in BANK.candidates], axis=0)
        assert np.allclose(trace.positions[1], expected, rtol=0.0, atol=1e-9)

    def test_forward_replays_step_by_step_on_a_generated_scene(self, small_synth_config):
        scene = gen_scene(small_synth_config, 0)
        P = np.asarray(scene.things_points, dtype=np.float64)
        F = np.asarray(scene.features, dtype=np.float64)
        C = np.asarray(scene.regressed_centers, dtype=np.float64)
        head = build_head('weighted', F.shape[1], len(BANK), hidden_sizes=(8,), seed=3)
        head.fit_normalizer(F)
        schedule = IterationSchedule()
        config = FinalClusterConfig()
        assignment, trace = ds_forward(P, F, C, schedule, BANK, head, config, seed_count=150, seed=5)

        mask = fps(P, 150, 5)
        assert np.array_equal(trace.seed_index, mask)
        X = C[mask]
        seed_features = F[mask]
        for i in range(schedule.iterations):
            W = loop_weights(head, seed_features)
            shifts = [brute_flat_shift(X, bandwidth) for bandwidth in BANK.candidates]
            X = sum(W[:, [j]] * shift for j, shift in enumerate(shifts))
            assert np.allclose(trace.positions[i + 1], X, rtol=0.0, atol=1e-9), i

        seed_assignment, _ = mean_shift(X, config.bandwidth, max_iters=config.max_iters,
                                        convergence_tol=config.convergence_tol, merge_radius=config.merge_radius)
        d2 = np.sum((P[:, None, :] - P[mask][None, :, :]) ** 2, axis=2)
        labels = seed_assignment.labels[np.argmin(d2, axis=1)]
        small = np.bincount(labels) < config.min_instance_points
        small[0] = True
        expected = np.where(small[labels], 0, labels)

        assert assignment.num_clusters >= 1
        assert same_partition(assignment.labels, expected)
