"""
Clustering package: spatial index, heuristic clustering and dynamic shifting
"""
from .dynamic_shifting import (BandwidthBank, FinalClusterConfig, IterationSchedule, ds_backward, ds_forward,
                               ds_iteration, ds_loss, flat_kernel_shift)
from .heuristic import bfs_cluster, dbscan, mean_shift
from .model_io import load_head, save_head
from .optimizer import AdamOptimizer, adam_step
from .spatial_index import GridIndex, build_index, fps
from .trainer import DynamicShiftTrainer, TrainConfig, train
from .weight_head import DirectRegressionHead, WeightHead

__all__ = [
    'BandwidthBank', 'FinalClusterConfig', 'IterationSchedule', 'ds_backward', 'ds_forward',
    'ds_iteration', 'ds_loss', 'flat_kernel_shift',
    'bfs_cluster', 'dbscan', 'mean_shift',
    'load_head', 'save_head',
    'AdamOptimizer', 'adam_step',
    'GridIndex', 'build_index', 'fps',
    'DynamicShiftTrainer', 'TrainConfig', 'train',
    'DirectRegressionHead', 'WeightHead',
]
