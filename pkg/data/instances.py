"""
Ground-truth instance centers and the instance-branch offset loss
"""
import logging
from typing import List

import numpy as np
import pandas as pd

from common import InstanceSummary, PointCloud, SceneLabels
from errors import SizeMismatchError

logger = logging.getLogger(__name__)


def compute_instance_centers(cloud: PointCloud, labels: SceneLabels) -> List[InstanceSummary]:
    """
    Tight axis-aligned box center of every instance

    Args:
        cloud: Scene points
        labels: Ground-truth labels (instance 0 = no instance)

    Returns:
        InstanceSummary per instance id > 0, sorted by id
    """
    if len(cloud) != len(labels):
        raise SizeMismatchError(f"{len(labels)} labels for {len(cloud)} points")

    mask = labels.instance > 0
    if not np.any(mask):
        return []

    df = pd.DataFrame(cloud.points[mask], columns=['x', 'y', 'z'])
    df['instance'] = labels.instance[mask]
    df['semantic'] = labels.semantic[mask]
    grouped = df.groupby('instance', sort=True)
    lo = grouped[['x', 'y', 'z']].min()
    hi = grouped[['x', 'y', 'z']].max()
    counts = grouped.size()
    semantic = grouped['semantic'].agg(lambda s: s.mode().min())

    summaries = []
    for instance_id in lo.index:
        box_min = lo.loc[instance_id].to_numpy(dtype=np.float64)
        box_max = hi.loc[instance_id].to_numpy(dtype=np.float64)
        summaries.append(InstanceSummary(
            instance_id=int(instance_id),
            point_count=int(counts.loc[instance_id]),
            center=(box_min + box_max) / 2.0,
            semantic=int(semantic.loc[instance_id]),
            box_min=box_min,
            box_max=box_max,
        ))
    return summaries


def centers_per_point(instance_ids: np.ndarray, summaries: List[InstanceSummary]) -> np.ndarray:
    """
    Gather each point's ground-truth center

    Args:
        instance_ids: Instance id per point (all > 0 and present in summaries)
        summaries: Output of compute_instance_centers

    Returns:
        (N, 3) array of centers
    """
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    if len(instance_ids) == 0:
        return np.zeros((0, 3))
    ids = np.array([s.instance_id for s in summaries], dtype=np.int64)
    centers = np.array([s.center for s in summaries], dtype=np.float64).reshape(-1, 3)
    order = np.argsort(ids)
    position = np.searchsorted(ids[order], instance_ids)
    position = np.clip(position, 0, max(len(ids) - 1, 0))
    if len(ids) == 0 or np.any(ids[order][position] != instance_ids):
        missing = sorted(set(instance_ids.tolist()) - set(ids.tolist()))
        raise KeyError(f"No center for instance ids {missing}")
    return centers[order][position]


def offset_loss(offsets: np.ndarray, things_points: np.ndarray, centers: np.ndarray) -> float:
    """
    Mean L1 distance between predicted and ground-truth offsets

    Args:
        offsets: (M, 3) predicted offsets O
        things_points: (M, 3) points P
        centers: (M, 3) ground-truth centers per point

    Returns:
        (1/M) sum_i |O[i] - (C[i] - P[i])|_1 in meters
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    things_points = np.asarray(things_points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if not (offsets.shape == things_points.shape == centers.shape):
        raise SizeMismatchError(
            f"Offset loss inputs disagree: {offsets.shape}, {things_points.shape}, {centers.shape}"
        )
    if len(offsets) == 0:
        raise ValueError("Offset loss is undefined for zero points")
    return float(np.abs(offsets - (centers - things_points)).sum(axis=1).mean())
