"""
Uniform-grid spatial index with radius queries, nearest neighbours and
farthest point sampling
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Upper bound on the size of one dense (queries x candidates) distance block
MAX_BLOCK_ELEMENTS = 2_000_000


def squared_distance_block(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """
    Squared Euclidean distances between every query and every candidate

    Evaluated axis by axis so that a single entry is computed with the same
    arithmetic no matter how many rows or columns the block has.

    Args:
        queries: (Q, 3) array
        candidates: (C, 3) array

    Returns:
        (Q, C) array of squared distances
    """
    dx = queries[:, None, 0] - candidates[None, :, 0]
    dy = queries[:, None, 1] - candidates[None, :, 1]
    dz = queries[:, None, 2] - candidates[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def squared_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances from one query point to every point"""
    q = np.asarray(q, dtype=np.float64).reshape(1, 3)
    return squared_distance_block(q, np.asarray(points, dtype=np.float64).reshape(-1, 3))[0]


class GridIndex:
    """Points bucketed into cubic cells keyed by integer cell coordinates"""

    def __init__(self, points: np.ndarray, cell_size: float):
        """
        Build the index

        Args:
            points: (M, 3) coordinates in meters
            cell_size: Edge length of a cell in meters
        """
        if not np.isfinite(cell_size) or cell_size <= 0:
            raise ValueError(f"Cell size must be positive, got {cell_size}")
        points = np.array(points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("Cannot index non-finite coordinates")
        points.setflags(write=False)

        self.points = points
        self.cell_size = float(cell_size)
        self._cells: Dict[Tuple[int, int, int], np.ndarray] = {}
        self._cell_keys = np.zeros((0, 3), dtype=np.int64)
        self._cell_members: List[np.ndarray] = []

        if len(points):
            keys = self.cell_keys(points)
            order = np.lexsort((np.arange(len(points)), keys[:, 2], keys[:, 1], keys[:, 0]))
            sorted_keys = keys[order]
            starts = np.flatnonzero(np.r_[True, np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)])
            self._cell_keys = sorted_keys[starts]
            self._cell_members = np.split(order, starts[1:])
            self._cells = {tuple(key): members
                           for key, members in zip(self._cell_keys.tolist(), self._cell_members)}

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_cells(self) -> int:
        return len(self._cell_members)

    def cell_keys(self, coords: np.ndarray) -> np.ndarray:
        """Integer cell coordinates of the given positions"""
        return np.floor(np.asarray(coords, dtype=np.float64) / self.cell_size).astype(np.int64)

    def _reach(self, radius: float) -> int:
        return int(np.ceil(radius / self.cell_size))

    def _gather(self, key: np.ndarray, reach: int) -> np.ndarray:
        """Indices of points in the cells within `reach` cells of `key` (ascending)"""
        span = 2 * reach + 1
        if span ** 3 > len(self._cell_members):
            selected = np.flatnonzero(np.all(np.abs(self._cell_keys - key) <= reach, axis=1))
            parts = [self._cell_members[i] for i in selected]
        else:
            kx, ky, kz = (int(v) for v in key)
            parts = []
            for dx in range(-reach, reach + 1):
                for dy in range(-reach, reach + 1):
                    for dz in range(-reach, reach + 1):
                        members = self._cells.get((kx + dx, ky + dy, kz + dz))
                        if members is not None:
                            parts.append(members)
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    def _query_groups(self, queries: np.ndarray):
        """Yield (cell key, query row indices) for queries sharing a cell"""
        keys = self.cell_keys(queries)
        order = np.lexsort((np.arange(len(queries)), keys[:, 2], keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        starts = np.flatnonzero(np.r_[True, np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)])
        for start, rows in zip(starts, np.split(order, starts[1:])):
            yield sorted_keys[start], rows

    def neighborhoods(self, queries: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Radius neighbourhoods of many queries at once

        Args:
            queries: (Q, 3) query positions
            radius: Closed-ball radius in meters

        Returns:
            CSR pair (indptr, indices); neighbours of query i are
            indices[indptr[i]:indptr[i + 1]] in ascending order
        """
        if radius < 0:
            raise ValueError(f"Radius must be nonnegative, got {radius}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(queries) == 0 or len(self.points) == 0:
            return np.zeros(len(queries) + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)

        r2 = radius * radius
        reach = self._reach(radius)
        hit_rows: List[np.ndarray] = []
        hit_cols: List[np.ndarray] = []
        for key, rows in self._query_groups(queries):
            candidates = self._gather(key, reach)
            if len(candidates) == 0:
                continue
            block_rows = max(1, MAX_BLOCK_ELEMENTS // len(candidates))
            for start in range(0, len(rows), block_rows):
                chunk = rows[start:start + block_rows]
                d2 = squared_distance_block(queries[chunk], self.points[candidates])
                r_idx, c_idx = np.nonzero(d2 <= r2)
                hit_rows.append(chunk[r_idx])
                hit_cols.append(candidates[c_idx])

        if not hit_rows:
            return np.zeros(len(queries) + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        rows = np.concatenate(hit_rows)
        cols = np.concatenate(hit_cols)
        order = np.lexsort((cols, rows))
        counts = np.bincount(rows, minlength=len(queries))
        indptr = np.r_[0, np.cumsum(counts)].astype(np.int64)
        return indptr, cols[order]

    def ball_means(self, queries: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Mean of the indexed points inside each query's ball

        Args:
            queries: (Q, 3) query positions
            radius: Ball radius in meters

        Returns:
            Tuple of ((Q, 3) means, (Q,) member counts); a query with an empty
            ball keeps its own position
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        indptr, indices = self.neighborhoods(queries, radius)
        counts = np.diff(indptr)
        means = queries.copy()
        filled = counts > 0
        if np.any(filled):
            sums = np.add.reduceat(self.points[indices], indptr[:-1][filled], axis=0)
            means[filled] = sums / counts[filled, None]
        return means, counts

    def radius_query(self, q: np.ndarray, radius: float) -> np.ndarray:
        """
        Indices of all points within `radius` of q (closed ball)

        Args:
            q: Query position
            radius: Radius in meters

        Returns:
            Ascending array of point indices
        """
        _, indices = self.neighborhoods(np.asarray(q, dtype=np.float64).reshape(1, 3), radius)
        return indices

    def nearest_many(self, queries: np.ndarray) -> np.ndarray:
        """
        Nearest indexed point for every query; ties go to the smallest index

        Args:
            queries: (Q, 3) query positions

        Returns:
            (Q,) array of point indices
        """
        if len(self.points) == 0:
            raise ValueError("Nearest-neighbour query on an empty index")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        result = np.empty(len(queries), dtype=np.int64)

        for key, rows in self._query_groups(queries):
            reach = 0
            candidates = self._gather(key, reach)
            while len(candidates) == 0:
                reach = max(1, 2 * reach)
                candidates = self._gather(key, reach)

            best = self._closest(queries[rows], candidates)
            gap = queries[rows] - self.points[best]
            worst = np.sqrt(np.max(np.einsum('ij,ij->i', gap, gap)))
            needed = int(np.ceil(worst / self.cell_size * (1.0 + 1e-12)))
            if needed > reach:
                best = self._closest(queries[rows], self._gather(key, needed))
            result[rows] = best
        return result

    def _closest(self, queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        """Closest candidate per query; candidates ascending so argmin keeps the smallest index"""
        best = np.empty(len(queries), dtype=np.int64)
        block_rows = max(1, MAX_BLOCK_ELEMENTS // len(candidates))
        for start in range(0, len(queries), block_rows):
            d2 = squared_distance_block(queries[start:start + block_rows], self.points[candidates])
            best[start:start + block_rows] = candidates[np.argmin(d2, axis=1)]
        return best

    def nearest(self, q: np.ndarray) -> int:
        """Index of the point closest to q; ties go to the smallest index"""
        return int(self.nearest_many(np.asarray(q, dtype=np.float64).reshape(1, 3))[0])


def build_index(points: np.ndarray, cell_size: float) -> GridIndex:
    """
    Build a uniform grid index

    Args:
        points: (M, 3) coordinates
        cell_size: Cell edge length in meters, > 0

    Returns:
        GridIndex over all points
    """
    index = GridIndex(points, cell_size)
    logger.debug(f"Indexed {len(index)} points in {index.num_cells} cells of {cell_size} m")
    return index


def fps(points: np.ndarray, k: int, seed: int = 0, start_index: Optional[int] = None) -> np.ndarray:
    """
    Farthest point sampling

    Args:
        points: (M, 3) coordinates
        k: Number of samples
        seed: Seed of the RNG that draws the first sample
        start_index: Forces the first sample instead of drawing it

    Returns:
        Ordered array of min(k, M) unique point indices
    """
    if k < 0:
        raise ValueError(f"Sample count must be nonnegative, got {k}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    num_points = len(points)
    if k >= num_points:
        return np.arange(num_points, dtype=np.int64)
    if k == 0:
        return np.zeros(0, dtype=np.int64)

    if start_index is None:
        start_index = int(np.random.default_rng(seed).integers(num_points))
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    min_d2 = squared_distances(points, points[start_index])
    min_d2[start_index] = -np.inf
    for t in range(1, k):
        idx = int(np.argmax(min_d2))
        selected[t] = idx
        np.minimum(min_d2, squared_distances(points, points[idx]), out=min_d2)
        min_d2[idx] = -np.inf
    return selected
