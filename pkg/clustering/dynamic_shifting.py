"""
Dynamic shifting: learnable multi-bandwidth mean shift over seeding points

Seeds sampled from the regressed centers are shifted a fixed number of times.
Each shift blends the flat-kernel targets of every bandwidth candidate with
per-seed weights from a WeightHead, or moves seeds with a Gaussian kernel
whose bandwidth comes from a DirectRegressionHead. Candidate targets and the
positions entering an iteration are constants for backpropagation, so the
loss of iteration i only reaches the head through iteration i's weights.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from clustering.heuristic import (DEFAULT_CONVERGENCE_TOL, DEFAULT_MAX_ITERS, bfs_cluster,
                                  mean_shift, relabel_first_touch)
from clustering.spatial_index import MAX_BLOCK_ELEMENTS, build_index, fps, squared_distance_block
from clustering.weight_head import DirectRegressionHead, MLP, WeightHead
from common import ClusterAssignment
from errors import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = (0.2, 1.7, 3.2)
DEFAULT_ITERATIONS = 4
DEFAULT_SEED_COUNT = 10000

# Cell size of the index over seeds used for the final nearest-seed assignment
SEED_INDEX_CELL = 1.0

Head = Union[WeightHead, DirectRegressionHead]


@dataclass(frozen=True)
class BandwidthBank:
    """Bandwidth candidates in meters, strictly increasing"""
    candidates: Tuple[float, ...] = DEFAULT_CANDIDATES

    def __post_init__(self):
        candidates = tuple(float(c) for c in self.candidates)
        if not candidates:
            raise ConfigurationError("Bandwidth bank needs at least one candidate")
        if any(not np.isfinite(c) or c <= 0 for c in candidates):
            raise ConfigurationError(f"Bandwidth candidates must be positive, got {candidates}")
        if any(b <= a for a, b in zip(candidates, candidates[1:])):
            raise ConfigurationError(f"Bandwidth candidates must be strictly increasing, got {candidates}")
        object.__setattr__(self, 'candidates', candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    def as_array(self) -> np.ndarray:
        return np.array(self.candidates, dtype=np.float64)


@dataclass(frozen=True)
class IterationSchedule:
    """Iteration count, step scale and per-iteration loss weights"""
    iterations: int = DEFAULT_ITERATIONS
    step_scale: float = 1.0
    loss_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ConfigurationError(f"Iteration count must be at least 1, got {self.iterations}")
        if not self.step_scale >= 0:
            raise ConfigurationError(f"Step scale must be nonnegative, got {self.step_scale}")
        weights = self.loss_weights
        if weights is None:
            weights = (1.0,) * int(self.iterations)
        weights = tuple(float(w) for w in weights)
        if len(weights) != int(self.iterations):
            raise ConfigurationError(
                f"Expected {self.iterations} loss weights, got {len(weights)}"
            )
        if any(not w >= 0 for w in weights):
            raise ConfigurationError(f"Loss weights must be nonnegative, got {weights}")
        object.__setattr__(self, 'iterations', int(self.iterations))
        object.__setattr__(self, 'step_scale', float(self.step_scale))
        object.__setattr__(self, 'loss_weights', weights)


@dataclass(frozen=True)
class FinalClusterConfig:
    """Heuristic that groups converged seeds, plus the minimum instance size"""
    algorithm: str = 'meanshift'
    bandwidth: float = 0.65
    radius: float = 1.2
    max_iters: int = DEFAULT_MAX_ITERS
    convergence_tol: float = DEFAULT_CONVERGENCE_TOL
    merge_radius: Optional[float] = None
    min_instance_points: int = 50

    def __post_init__(self):
        if self.algorithm not in ('meanshift', 'bfs'):
            raise ConfigurationError(f"Unknown final clustering algorithm '{self.algorithm}'")
        if not self.bandwidth > 0 or not self.radius > 0:
            raise ConfigurationError("Final clustering bandwidth and radius must be positive")
        if self.min_instance_points < 0:
            raise ConfigurationError("min_instance_points must be nonnegative")


@dataclass
class ForwardTrace:
    """
    Record of one dynamic-shifting forward pass

    positions[0] is the initial seed set and positions[i] the output of
    iteration i. For weighted heads targets[i - 1] is the (l, M', 3) stack of
    candidate targets and weights[i - 1] the (M', l) weights of iteration i;
    direct heads record bandwidths[i - 1] instead.
    """
    seed_index: np.ndarray
    positions: List[np.ndarray]
    step_scale: float = 1.0
    targets: List[np.ndarray] = field(default_factory=list)
    weights: List[np.ndarray] = field(default_factory=list)
    bandwidths: List[np.ndarray] = field(default_factory=list)
    head_kind: str = 'weighted'

    @property
    def iterations(self) -> int:
        return len(self.positions) - 1

    @property
    def num_seeds(self) -> int:
        return len(self.seed_index)

    @property
    def final_positions(self) -> np.ndarray:
        return self.positions[-1]

    def effective_bandwidths(self, bank: Optional[BandwidthBank] = None) -> List[np.ndarray]:
        """Per-iteration, per-seed effective bandwidth in meters"""
        if self.head_kind == 'direct':
            return [b.copy() for b in self.bandwidths]
        if bank is None:
            raise ValueError("A bandwidth bank is needed for weighted traces")
        return [effective_bandwidths(w, bank) for w in self.weights]


@dataclass(frozen=True)
class LossReport:
    """Per-iteration L1 losses and their weighted sum"""
    per_iteration: Tuple[float, ...]
    total: float

    def to_dict(self) -> Dict:
        return {'per_iteration': list(self.per_iteration), 'total': self.total}


@dataclass
class HeadGradients:
    """Gradients of the dynamic-shifting loss w.r.t. head parameters and seed features"""
    parameters: Dict[str, np.ndarray]
    features: np.ndarray


def _check_positions(X: np.ndarray, what: str = 'X') -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ShapeMismatchError(f"{what} must have shape (M, 3), got {X.shape}")
    return X


def flat_kernel_shift(X: np.ndarray, bandwidth: float) -> np.ndarray:
    """
    Flat-kernel targets of every seed

    Args:
        X: (M', 3) seed positions
        bandwidth: Ball radius in meters, > 0

    Returns:
        (M', 3) array; row i is the mean of all rows of X within `bandwidth` of X[i]
    """
    if not bandwidth > 0:
        raise ValueError(f"Kernel bandwidth must be positive, got {bandwidth}")
    X = _check_positions(X)
    if len(X) == 0:
        return X.copy()
    means, _ = build_index(X, bandwidth).ball_means(X, bandwidth)
    return means


def candidate_targets(X: np.ndarray, bank: BandwidthBank) -> np.ndarray:
    """(l, M', 3) flat-kernel targets for every candidate"""
    X = _check_positions(X)
    return np.stack([flat_kernel_shift(X, delta) for delta in bank.candidates])


def weight_head_forward(features: np.ndarray, head: WeightHead) -> np.ndarray:
    """
    Candidate weights of every seed

    Args:
        features: (M', D') seed features
        head: Weight head

    Returns:
        (M', l) row-stochastic weights
    """
    return head.weights_for(features)


def _blend(X: np.ndarray, W: np.ndarray, targets: np.ndarray, step_scale: float) -> np.ndarray:
    blended = np.zeros_like(X)
    for j in range(len(targets)):
        blended += W[:, j, None] * targets[j]
    if step_scale == 1.0:
        return blended
    return X + step_scale * (blended - X)


def _check_weights(W: np.ndarray, num_seeds: int, bank: BandwidthBank) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (num_seeds, len(bank)):
        raise ShapeMismatchError(f"Weights must have shape ({num_seeds}, {len(bank)}), got {W.shape}")
    if num_seeds and not np.allclose(W.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ValueError("Candidate weight rows must sum to 1")
    return W


def ds_iteration(X: np.ndarray, W: np.ndarray, bank: BandwidthBank, step_scale: float = 1.0) -> np.ndarray:
    """
    One dynamic-shifting step

    Args:
        X: (M', 3) seed positions
        W: (M', l) candidate weights, rows summing to 1
        bank: Bandwidth candidates
        step_scale: Step scale eta

    Returns:
        X + eta * (sum_j W[:, j] * S_j - X); exactly sum_j W[:, j] * S_j when eta = 1
    """
    X = _check_positions(X)
    W = _check_weights(W, len(X), bank)
    return _blend(X, W, candidate_targets(X, bank), step_scale)


def gaussian_kernel_shift(X: np.ndarray, bandwidths: np.ndarray) -> np.ndarray:
    """
    Gaussian-weighted mean of all seeds with a per-seed bandwidth

    Args:
        X: (M', 3) seed positions
        bandwidths: (M',) positive bandwidths

    Returns:
        (M', 3) shifted positions
    """
    X = _check_positions(X)
    bandwidths = np.asarray(bandwidths, dtype=np.float64).reshape(-1)
    if len(bandwidths) != len(X):
        raise ShapeMismatchError(f"{len(bandwidths)} bandwidths for {len(X)} seeds")
    shifted = np.empty_like(X)
    if len(X) == 0:
        return shifted
    block_rows = max(1, MAX_BLOCK_ELEMENTS // len(X))
    for start in range(0, len(X), block_rows):
        stop = start + block_rows
        d2 = squared_distance_block(X[start:stop], X)
        kernel = np.exp(-d2 / (2.0 * bandwidths[start:stop, None] ** 2))
        shifted[start:stop] = (kernel @ X) / kernel.sum(axis=1, keepdims=True)
    return shifted


def gaussian_direct_shift(X: np.ndarray, features: np.ndarray, head: DirectRegressionHead) -> np.ndarray:
    """
    Gaussian shift with bandwidths regressed by a DirectRegressionHead

    Args:
        X: (M', 3) seed positions
        features: (M', D') seed features
        head: Direct-regression head

    Returns:
        (M', 3) shifted positions
    """
    return gaussian_kernel_shift(X, head.bandwidths_for(features))


def effective_bandwidths(W: np.ndarray, bank: BandwidthBank) -> np.ndarray:
    """
    Candidate-weighted bandwidth of every seed

    Args:
        W: (M', l) candidate weights
        bank: Bandwidth candidates

    Returns:
        (M',) array W @ candidates in meters
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != len(bank):
        raise ShapeMismatchError(f"Weights of shape {W.shape} do not match {len(bank)} candidates")
    return W @ bank.as_array()


def shift_seeds(P: np.ndarray, F: np.ndarray, C: np.ndarray, schedule: IterationSchedule,
                bank: BandwidthBank, head: Head, seed_count: int = DEFAULT_SEED_COUNT,
                seed: int = 0) -> ForwardTrace:
    """
    Sample seeds with FPS on P and run the shifting iterations on their centers

    Args:
        P: (M, 3) things points
        F: (M, D') things features
        C: (M, 3) regressed centers
        schedule: Iteration schedule
        bank: Bandwidth candidates
        head: WeightHead or DirectRegressionHead
        seed_count: Number of seeds M'
        seed: FPS start seed

    Returns:
        ForwardTrace of all iterations
    """
    P = _check_positions(P, 'P')
    C = _check_positions(C, 'C')
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or len(F) != len(P) or len(C) != len(P):
        raise ShapeMismatchError(f"P, F and C must be row-aligned: {P.shape}, {F.shape}, {C.shape}")
    if seed_count < 1:
        raise ConfigurationError(f"seed_count must be at least 1, got {seed_count}")
    if isinstance(head, WeightHead) and head.num_candidates != len(bank):
        raise ShapeMismatchError(f"Head emits {head.num_candidates} weights for {len(bank)} candidates")

    direct = isinstance(head, DirectRegressionHead)
    seed_index = fps(P, seed_count, seed)
    X = C[seed_index].copy()
    seed_features = F[seed_index]
    trace = ForwardTrace(seed_index=seed_index, positions=[X], step_scale=schedule.step_scale,
                         head_kind='direct' if direct else 'weighted')
    if len(seed_index) == 0:
        trace.positions = [X] * (schedule.iterations + 1)
        return trace

    for iteration in range(1, schedule.iterations + 1):
        if direct:
            bandwidths = head.bandwidths_for(seed_features)
            X_next = gaussian_kernel_shift(X, bandwidths)
            if schedule.step_scale != 1.0:
                X_next = X + schedule.step_scale * (X_next - X)
            trace.bandwidths.append(bandwidths)
        else:
            W = weight_head_forward(seed_features, head)
            targets = candidate_targets(X, bank)
            X_next = _blend(X, W, targets, schedule.step_scale)
            trace.targets.append(targets)
            trace.weights.append(W)
        trace.positions.append(X_next)
        logger.debug(
            f"Iteration {iteration}: mean seed displacement "
            f"{float(np.linalg.norm(X_next - X, axis=1).mean()):.4f} m"
        )
        X = X_next
    return trace


def cluster_seeds(X: np.ndarray, config: FinalClusterConfig) -> ClusterAssignment:
    """Group converged seed positions with the configured heuristic"""
    if config.algorithm == 'bfs':
        return bfs_cluster(X, config.radius)
    assignment, _ = mean_shift(X, config.bandwidth, max_iters=config.max_iters,
                               convergence_tol=config.convergence_tol,
                               merge_radius=config.merge_radius)
    return assignment


def assign_from_seeds(P: np.ndarray, seed_index: np.ndarray, seed_labels: np.ndarray,
                      min_instance_points: int = 0) -> ClusterAssignment:
    """
    Give every point the cluster id of its nearest seed, then drop small clusters

    Args:
        P: (M, 3) things points
        seed_index: Indices of the seeds into P
        seed_labels: Cluster id of every seed
        min_instance_points: Clusters with fewer points become 0

    Returns:
        ClusterAssignment over all M points
    """
    if len(P) == 0 or len(seed_index) == 0:
        return ClusterAssignment(np.zeros(len(P), dtype=np.int64), 0)
    nearest = build_index(P[seed_index], SEED_INDEX_CELL).nearest_many(P)
    labels = np.asarray(seed_labels, dtype=np.int64)[nearest]
    if min_instance_points > 0:
        counts = np.bincount(labels)
        small = counts < min_instance_points
        small[0] = True
        labels = np.where(small[labels], 0, labels)
    return relabel_first_touch(labels, labels > 0)


def ds_forward(P: np.ndarray, F: np.ndarray, C: np.ndarray, schedule: IterationSchedule,
               bank: BandwidthBank, head: Head,
               final_cluster_config: Optional[FinalClusterConfig] = None,
               seed_count: int = DEFAULT_SEED_COUNT, seed: int = 0) -> Tuple[ClusterAssignment, ForwardTrace]:
    """
    Full dynamic-shifting clustering of the things points of one frame

    Args:
        P: (M, 3) things points
        F: (M, D') things features
        C: (M, 3) regressed centers P + O
        schedule: Iteration schedule
        bank: Bandwidth candidates
        head: WeightHead or DirectRegressionHead
        final_cluster_config: Heuristic applied to the converged seeds
        seed_count: Number of FPS seeds
        seed: FPS start seed

    Returns:
        Tuple of (ClusterAssignment over all M points, ForwardTrace)
    """
    config = final_cluster_config or FinalClusterConfig()
    trace = shift_seeds(P, F, C, schedule, bank, head, seed_count, seed)
    if trace.num_seeds == 0:
        return ClusterAssignment.empty(), trace

    seed_assignment = cluster_seeds(trace.final_positions, config)
    assignment = assign_from_seeds(np.asarray(P, dtype=np.float64), trace.seed_index,
                                   seed_assignment.labels, config.min_instance_points)
    logger.debug(
        f"Dynamic shifting: {trace.num_seeds} seeds -> {seed_assignment.num_clusters} clusters, "
        f"{assignment.num_clusters} after the size filter"
    )
    return assignment, trace


def _check_gt(trace: ForwardTrace, gt_centers: np.ndarray) -> np.ndarray:
    gt_centers = _check_positions(gt_centers, 'gt_centers')
    if len(gt_centers) != trace.num_seeds:
        raise ShapeMismatchError(f"{len(gt_centers)} ground-truth centers for {trace.num_seeds} seeds")
    if trace.num_seeds == 0:
        raise ValueError("Dynamic-shifting loss is undefined without seeds")
    return gt_centers


def _losses(positions: Sequence[np.ndarray], gt_centers: np.ndarray, schedule: IterationSchedule) -> LossReport:
    per_iteration = tuple(float(np.abs(X - gt_centers).sum(axis=1).mean()) for X in positions)
    if len(per_iteration) != schedule.iterations:
        raise ShapeMismatchError(
            f"Trace has {len(per_iteration)} iterations, schedule expects {schedule.iterations}"
        )
    total = float(np.dot(schedule.loss_weights, per_iteration))
    return LossReport(per_iteration=per_iteration, total=total)


def ds_loss(trace: ForwardTrace, gt_centers: np.ndarray, schedule: IterationSchedule) -> LossReport:
    """
    Per-iteration mean L1 distance of the seeds to their true centers

    Args:
        trace: Forward trace
        gt_centers: (M', 3) true center of every seed's instance
        schedule: Schedule providing the loss weights

    Returns:
        LossReport with l_i and the weighted total
    """
    gt_centers = _check_gt(trace, gt_centers)
    return _losses(trace.positions[1:], gt_centers, schedule)


def _heads_per_iteration(heads: Union[Head, Sequence[Head]], iterations: int) -> List[Head]:
    if isinstance(heads, MLP):
        return [heads] * iterations
    heads = list(heads)
    if len(heads) != iterations:
        raise ShapeMismatchError(f"{len(heads)} heads for {iterations} iterations")
    return heads


def replay_losses(trace: ForwardTrace, features: np.ndarray, heads: Union[Head, Sequence[Head]],
                  bank: BandwidthBank, gt_centers: np.ndarray, schedule: IterationSchedule) -> LossReport:
    """
    Recompute the losses from a frozen trace with possibly different heads

    Iteration i starts from the recorded positions[i - 1] and, for weighted
    traces, reuses the recorded candidate targets; only the weights (or
    bandwidths) come from heads[i - 1]. This is the function whose exact
    gradient ds_backward returns.

    Args:
        trace: Trace from shift_seeds or ds_forward
        features: (M', D') seed features
        heads: One head for all iterations, or one per iteration
        bank: Bandwidth candidates
        gt_centers: (M', 3) true centers of the seeds
        schedule: Iteration schedule

    Returns:
        LossReport
    """
    gt_centers = _check_gt(trace, gt_centers)
    heads = _heads_per_iteration(heads, trace.iterations)
    positions = []
    for i, head in enumerate(heads):
        X = trace.positions[i]
        if trace.head_kind == 'direct':
            shifted = gaussian_kernel_shift(X, head.bandwidths_for(features))
            positions.append(X + trace.step_scale * (shifted - X) if trace.step_scale != 1.0 else shifted)
        else:
            positions.append(_blend(X, weight_head_forward(features, head), trace.targets[i], trace.step_scale))
    return _losses(positions, gt_centers, schedule)


def _gaussian_bandwidth_grad(X: np.ndarray, shifted: np.ndarray, bandwidths: np.ndarray,
                             d_shifted: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. each seed's bandwidth given the gradient on its Gaussian-shifted position"""
    grad = np.empty(len(X))
    block_rows = max(1, MAX_BLOCK_ELEMENTS // len(X))
    for start in range(0, len(X), block_rows):
        stop = start + block_rows
        delta = bandwidths[start:stop, None]
        d2 = squared_distance_block(X[start:stop], X)
        kernel = np.exp(-d2 / (2.0 * delta ** 2))
        d_kernel = kernel * d2 / delta ** 3
        # d out_x / d delta_x = sum_k dK_xk (X_k - out_x) / sum_k K_xk
        numerator = d_kernel @ X - d_kernel.sum(axis=1, keepdims=True) * shifted[start:stop]
        d_out = numerator / kernel.sum(axis=1, keepdims=True)
        grad[start:stop] = np.einsum('ij,ij->i', d_out, d_shifted[start:stop])
    return grad


def ds_backward(trace: ForwardTrace, features: np.ndarray, head: Head, bank: BandwidthBank,
                gt_centers: np.ndarray, schedule: IterationSchedule,
                upstream: float = 1.0) -> HeadGradients:
    """
    Gradient of upstream * L_ds w.r.t. the head parameters and the seed features

    The loss of iteration i reaches the head only through the weights (or
    bandwidths) of iteration i; candidate targets and incoming positions are
    constants.

    Args:
        trace: Trace produced with the same head and features
        features: (M', D') seed features
        head: Head shared by all iterations
        bank: Bandwidth candidates
        gt_centers: (M', 3) true centers of the seeds
        schedule: Iteration schedule
        upstream: Gradient of the final cost w.r.t. L_ds

    Returns:
        HeadGradients
    """
    gt_centers = _check_gt(trace, gt_centers)
    features = np.asarray(features, dtype=np.float64)
    if len(features) != trace.num_seeds:
        raise ShapeMismatchError(f"{len(features)} feature rows for {trace.num_seeds} seeds")
    if trace.iterations != schedule.iterations:
        raise ShapeMismatchError(
            f"Trace has {trace.iterations} iterations, schedule expects {schedule.iterations}"
        )
    direct = trace.head_kind == 'direct'
    if direct != isinstance(head, DirectRegressionHead):
        raise ShapeMismatchError(f"Head does not match a '{trace.head_kind}' trace")
    if not direct and head.num_candidates != len(bank):
        raise ShapeMismatchError(f"Head emits {head.num_candidates} weights for {len(bank)} candidates")

    outputs, cache = head.forward(features)
    num_seeds = trace.num_seeds
    eta = trace.step_scale
    d_outputs = np.zeros_like(outputs)

    for i in range(trace.iterations):
        X_prev = trace.positions[i]
        X_i = trace.positions[i + 1]
        # Upstream gradient on the iteration output
        G = upstream * schedule.loss_weights[i] * np.sign(X_i - gt_centers) / num_seeds
        if not np.any(G):
            continue
        if direct:
            bandwidths = trace.bandwidths[i]
            shifted = gaussian_kernel_shift(X_prev, bandwidths)
            d_delta = _gaussian_bandwidth_grad(X_prev, shifted, bandwidths, eta * G)
            d_outputs[:, 0] += d_delta * DirectRegressionHead.bandwidth_slope(outputs[:, 0])
        else:
            W = trace.weights[i]
            targets = trace.targets[i]
            d_weights = eta * np.einsum('jmc,mc->mj', targets, G)
            d_outputs += W * (d_weights - np.sum(W * d_weights, axis=1, keepdims=True))

    param_grads, d_features = head.backward(cache, d_outputs)
    return HeadGradients(parameters=param_grads, features=d_features)
