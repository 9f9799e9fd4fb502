"""
Consensus-driven fusion of semantic predictions and class-agnostic instances
"""
import logging
from typing import Union

import numpy as np
import pandas as pd

from common import ClusterAssignment, PanopticPrediction, SemanticScheme
from errors import SizeMismatchError

logger = logging.getLogger(__name__)


def modal_labels(semantic: np.ndarray, instance: np.ndarray) -> pd.Series:
    """
    Most frequent semantic label of every instance id > 0

    Ties go to the smallest class id.

    Args:
        semantic: Per-point semantic ids
        instance: Per-point instance ids

    Returns:
        Series mapping instance id -> modal class id
    """
    mask = instance > 0
    df = pd.DataFrame({'instance': instance[mask], 'semantic': semantic[mask]})
    if df.empty:
        return pd.Series(dtype=np.int64)
    counts = df.groupby(['instance', 'semantic']).size().reset_index(name='n')
    counts = counts.sort_values(['instance', 'n', 'semantic'], ascending=[True, False, True])
    winners = counts.drop_duplicates('instance', keep='first')
    return winners.set_index('instance')['semantic'].astype(np.int64)


def consensus_fusion(semantic_pred: np.ndarray,
                     instance_assignment: Union[ClusterAssignment, np.ndarray],
                     scheme: SemanticScheme) -> PanopticPrediction:
    """
    Give every point of an instance the instance's majority semantic label

    Instances whose majority label is not a things class are dissolved:
    their points keep their semantic prediction and get instance id 0.

    Args:
        semantic_pred: Per-point predicted class ids
        instance_assignment: Per-point instance ids (0 = none)
        scheme: Semantic scheme providing the things classes

    Returns:
        PanopticPrediction
    """
    if isinstance(instance_assignment, ClusterAssignment):
        instance_assignment = instance_assignment.labels
    semantic = np.asarray(semantic_pred, dtype=np.int64)
    instance = np.asarray(instance_assignment, dtype=np.int64)
    if semantic.shape != instance.shape:
        raise SizeMismatchError(
            f"{len(semantic)} semantic predictions for {len(instance)} instance ids"
        )

    fused_semantic = semantic.copy()
    fused_instance = instance.copy()
    modal = modal_labels(semantic, instance)
    if len(modal):
        ids = modal.index.to_numpy(dtype=np.int64)
        labels = modal.to_numpy(dtype=np.int64)
        keep = scheme.is_things(labels)

        members = instance > 0
        position = np.searchsorted(ids, instance[members])
        point_keep = keep[position]
        member_idx = np.flatnonzero(members)
        fused_semantic[member_idx[point_keep]] = labels[position[point_keep]]
        fused_instance[member_idx[~point_keep]] = 0

        dissolved = int((~keep).sum())
        if dissolved:
            logger.debug(f"Dissolved {dissolved} instances with a non-things majority label")
    return PanopticPrediction(semantic=fused_semantic, instance=fused_instance)
