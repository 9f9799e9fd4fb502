"""
Heuristic clustering baselines: BFS connected components, DBSCAN and
flat-kernel mean shift
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from clustering.spatial_index import build_index, fps
from common import ClusterAssignment, ModeSet

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 100
DEFAULT_CONVERGENCE_TOL = 1e-4


def relabel_first_touch(raw_labels: np.ndarray, valid: Optional[np.ndarray] = None) -> ClusterAssignment:
    """
    Compact arbitrary cluster labels to 1..K in order of first appearance

    Args:
        raw_labels: Per-point labels of any integer values
        valid: Mask of points that belong to a cluster; the rest become 0

    Returns:
        ClusterAssignment with ids 1..K
    """
    raw_labels = np.asarray(raw_labels, dtype=np.int64)
    labels = np.zeros(len(raw_labels), dtype=np.int64)
    if valid is None:
        valid = np.ones(len(raw_labels), dtype=bool)
    values = raw_labels[valid]
    if len(values) == 0:
        return ClusterAssignment(labels, 0)
    uniq, first, inverse = np.unique(values, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind='stable')] = np.arange(len(uniq))
    labels[valid] = rank[inverse.reshape(-1)] + 1
    return ClusterAssignment(labels, len(uniq))


def _adjacency(indptr: np.ndarray, indices: np.ndarray, size: int) -> csr_matrix:
    data = np.ones(len(indices), dtype=np.int8)
    return csr_matrix((data, indices, indptr), shape=(size, size))


def bfs_cluster(points: np.ndarray, radius: float) -> ClusterAssignment:
    """
    Connected components of the graph linking points within `radius`

    Args:
        points: (M, 3) coordinates
        radius: Link distance in meters, > 0

    Returns:
        ClusterAssignment with every point assigned
    """
    if not radius > 0:
        raise ValueError(f"BFS radius must be positive, got {radius}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return ClusterAssignment.empty()

    index = build_index(points, radius)
    indptr, indices = index.neighborhoods(points, radius)
    _, components = connected_components(_adjacency(indptr, indices, len(points)), directed=False)
    assignment = relabel_first_touch(components)
    logger.debug(f"BFS radius {radius}: {assignment.num_clusters} clusters from {len(points)} points")
    return assignment


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> ClusterAssignment:
    """
    Density-based clustering with core points

    A point is core when at least `min_pts` points (itself included) lie
    within `eps`. Border points join the cluster of their lowest-index core
    neighbour; everything else is noise (id 0).

    Args:
        points: (M, 3) coordinates
        eps: Neighbourhood radius in meters, > 0
        min_pts: Core threshold, >= 1

    Returns:
        ClusterAssignment
    """
    if not eps > 0:
        raise ValueError(f"DBSCAN eps must be positive, got {eps}")
    if min_pts < 1:
        raise ValueError(f"DBSCAN min_pts must be at least 1, got {min_pts}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    num_points = len(points)
    if num_points == 0:
        return ClusterAssignment.empty()

    index = build_index(points, eps)
    indptr, indices = index.neighborhoods(points, eps)
    counts = np.diff(indptr)
    core = counts >= min_pts
    rows = np.repeat(np.arange(num_points), counts)

    # Components among core points only
    core_edges = core[rows] & core[indices]
    graph = csr_matrix((np.ones(int(core_edges.sum()), dtype=np.int8),
                        (rows[core_edges], indices[core_edges])), shape=(num_points, num_points))
    _, components = connected_components(graph, directed=False)

    raw = components.copy()
    assigned = core.copy()

    border_edges = ~core[rows] & core[indices]
    if np.any(border_edges):
        border_rows = rows[border_edges]
        border_cols = indices[border_edges]
        # Neighbour lists are ascending, so the first hit per row is the lowest index
        first_rows, first_pos = np.unique(border_rows, return_index=True)
        raw[first_rows] = components[border_cols[first_pos]]
        assigned[first_rows] = True

    assignment = relabel_first_touch(raw, assigned)
    logger.debug(
        f"DBSCAN eps {eps} min_pts {min_pts}: {assignment.num_clusters} clusters, "
        f"{int((~assigned).sum())} noise points"
    )
    return assignment


def _merge_modes(positions: np.ndarray, populations: np.ndarray, merge_radius: float) -> np.ndarray:
    """Greedily keep the most populated converged seeds farther than merge_radius apart"""
    order = np.argsort(-populations, kind='stable')
    kept = [order[0]]
    kept_positions = positions[order[:1]]
    r2 = merge_radius * merge_radius
    for candidate in order[1:]:
        diff = kept_positions - positions[candidate]
        if np.all(np.einsum('ij,ij->i', diff, diff) > r2):
            kept.append(candidate)
            kept_positions = np.vstack([kept_positions, positions[candidate]])
    return positions[kept]


def mean_shift(points: np.ndarray, bandwidth: float,
               max_iters: int = DEFAULT_MAX_ITERS,
               convergence_tol: float = DEFAULT_CONVERGENCE_TOL,
               merge_radius: Optional[float] = None,
               seed_count: Optional[int] = None,
               seed: int = 0) -> Tuple[ClusterAssignment, ModeSet]:
    """
    Flat-kernel mean shift

    Seeds (FPS-sampled, or every point when seed_count is None or >= M) move
    to the mean of the input points within `bandwidth` until they move less
    than `convergence_tol` or `max_iters` is reached. Converged seeds closer
    than `merge_radius` collapse into one mode and every point joins its
    nearest mode.

    Args:
        points: (M, 3) coordinates
        bandwidth: Kernel radius in meters, > 0
        max_iters: Iteration cap, >= 1
        convergence_tol: Per-seed shift below which a seed stops
        merge_radius: Mode merge distance, defaults to bandwidth / 2
        seed_count: Number of FPS seeds
        seed: RNG seed of the FPS start

    Returns:
        Tuple of (ClusterAssignment, ModeSet ordered by cluster id)
    """
    if not bandwidth > 0:
        raise ValueError(f"Mean-shift bandwidth must be positive, got {bandwidth}")
    if max_iters < 1:
        raise ValueError(f"Mean-shift max_iters must be at least 1, got {max_iters}")
    if merge_radius is None:
        merge_radius = bandwidth / 2.0
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    num_points = len(points)
    if num_points == 0:
        return ClusterAssignment.empty(), ModeSet(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    if seed_count is None or seed_count >= num_points:
        seeds = np.arange(num_points)
    else:
        seeds = fps(points, seed_count, seed)

    index = build_index(points, bandwidth)
    positions = points[seeds].copy()
    active = np.ones(len(positions), dtype=bool)
    iteration = 0
    for iteration in range(1, max_iters + 1):
        moved, _ = index.ball_means(positions[active], bandwidth)
        shift = np.linalg.norm(moved - positions[active], axis=1)
        positions[active] = moved
        still_moving = np.flatnonzero(active)[shift >= convergence_tol]
        active[:] = False
        active[still_moving] = True
        if not np.any(active):
            break
    if np.any(active):
        logger.debug(f"Mean shift: {int(active.sum())} seeds still moving after {max_iters} iterations")

    _, populations = index.ball_means(positions, bandwidth)
    modes = _merge_modes(positions, populations, merge_radius)

    nearest_mode = build_index(modes, bandwidth).nearest_many(points)
    assignment = relabel_first_touch(nearest_mode)

    # Reorder modes so that row k holds the mode of cluster k + 1
    order = np.empty(assignment.num_clusters, dtype=np.int64)
    order[assignment.labels - 1] = nearest_mode
    counts = np.bincount(assignment.labels, minlength=assignment.num_clusters + 1)[1:]
    mode_set = ModeSet(modes[order], counts.astype(np.int64))

    logger.debug(
        f"Mean shift bandwidth {bandwidth}: {len(seeds)} seeds, {iteration} iterations, "
        f"{assignment.num_clusters} modes"
    )
    return assignment, mode_set
