"""
Scene validation for ensuring label consistency
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from common import PointCloud, SceneLabels, SemanticScheme
from data.instances import compute_instance_centers

logger = logging.getLogger(__name__)


class SceneValidator:
    """Validates point clouds and their ground-truth labels"""

    def __init__(self, scheme: SemanticScheme):
        self.scheme = scheme

    def validate_scene(self, cloud: PointCloud, labels: SceneLabels) -> Tuple[bool, List[str]]:
        """
        Validate a labeled scene

        Args:
            cloud: Scene points
            labels: Ground-truth labels

        Returns:
            Tuple of (is_valid, error_messages)
        """
        errors = []

        if len(cloud) != len(labels):
            errors.append(f"Point count {len(cloud)} does not match label count {len(labels)}")
            return False, errors

        if len(cloud) == 0:
            logger.warning("Scene has no points")
            return True, errors

        unknown = np.setdiff1d(np.unique(labels.semantic), sorted(self.scheme.class_names))
        if len(unknown):
            errors.append(f"Undeclared class ids: {unknown.tolist()}")

        instanced = labels.instance > 0
        not_things = instanced & ~self.scheme.is_things(labels.semantic)
        if np.any(not_things):
            errors.append(f"Instance ids on non-things points: {int(not_things.sum())} points")

        # One instance id must not span several classes
        if np.any(instanced):
            pairs = np.unique(np.column_stack([labels.instance[instanced], labels.semantic[instanced]]), axis=0)
            ids, counts = np.unique(pairs[:, 0], return_counts=True)
            if np.any(counts > 1):
                errors.append(f"Instances with mixed classes: {ids[counts > 1].tolist()}")

        things_without_id = self.scheme.is_things(labels.semantic) & ~instanced
        if np.any(things_without_id):
            logger.warning(f"Things points without an instance id: {int(things_without_id.sum())} points")

        return len(errors) == 0, errors

    def check_centers(self, cloud: PointCloud, labels: SceneLabels,
                      expected: Dict[int, np.ndarray], atol: float = 1e-9) -> Tuple[bool, List[str]]:
        """
        Check recorded instance centers against the tight-box recomputation

        Args:
            cloud: Scene points
            labels: Ground-truth labels
            expected: Recorded center per instance id
            atol: Absolute tolerance in meters

        Returns:
            Tuple of (is_consistent, issues)
        """
        issues = []
        recomputed = {s.instance_id: s.center for s in compute_instance_centers(cloud, labels)}
        missing = set(expected) ^ set(recomputed)
        if missing:
            issues.append(f"Instance ids differ between records and labels: {sorted(missing)}")
        for instance_id in sorted(set(expected) & set(recomputed)):
            if not np.allclose(expected[instance_id], recomputed[instance_id], atol=atol, rtol=0.0):
                issues.append(f"Center mismatch for instance {instance_id}")
        return len(issues) == 0, issues

    def validate_prediction_alignment(self, gt: SceneLabels, pred_len: int,
                                      frame_id: Optional[str] = None) -> List[str]:
        """Describe a point-count mismatch between ground truth and a prediction"""
        if len(gt) == pred_len:
            return []
        where = f"frame {frame_id}: " if frame_id else ""
        return [f"{where}{pred_len} predicted labels for {len(gt)} ground-truth points"]
