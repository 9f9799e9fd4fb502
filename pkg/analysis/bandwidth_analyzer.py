"""
Learned-bandwidth statistics and sweep tables
"""
import logging
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from analysis.panoptic_metrics import PanopticReport
from clustering.dynamic_shifting import BandwidthBank, ForwardTrace
from common import SemanticScheme


class BandwidthAnalyzer:
    """Collects effective bandwidths of seeds grouped by their ground-truth class"""

    def __init__(self, scheme: SemanticScheme, bank: Optional[BandwidthBank] = None):
        self.scheme = scheme
        self.bank = bank
        self.logger = logging.getLogger(__name__)
        # (iteration, class id) -> [sum, count]
        self._totals: Dict[tuple, List[float]] = defaultdict(lambda: [0.0, 0])

    def add_trace(self, trace: ForwardTrace, seed_semantic: np.ndarray):
        """
        Add the seeds of one forward pass

        Args:
            trace: Forward trace of a scene
            seed_semantic: Ground-truth class id of every seed
        """
        seed_semantic = np.asarray(seed_semantic, dtype=np.int64)
        if len(seed_semantic) != trace.num_seeds:
            raise ValueError(f"{len(seed_semantic)} seed classes for {trace.num_seeds} seeds")
        for iteration, bandwidths in enumerate(trace.effective_bandwidths(self.bank), 1):
            for class_id in np.unique(seed_semantic):
                members = bandwidths[seed_semantic == class_id]
                entry = self._totals[(iteration, int(class_id))]
                entry[0] += float(members.sum())
                entry[1] += len(members)

    def bandwidth_by_iteration(self) -> pd.DataFrame:
        """Mean effective bandwidth per iteration and class"""
        rows = [{
            'iteration': iteration,
            'class_id': class_id,
            'name': self.scheme.name(class_id),
            'seeds': int(count),
            'mean_bandwidth': total / count,
        } for (iteration, class_id), (total, count) in sorted(self._totals.items()) if count]
        return pd.DataFrame(rows, columns=['iteration', 'class_id', 'name', 'seeds', 'mean_bandwidth'])

    def effective_bandwidth_by_class(self) -> pd.DataFrame:
        """Mean effective bandwidth per class over all iterations"""
        df = self.bandwidth_by_iteration()
        if df.empty:
            return pd.DataFrame(columns=['class_id', 'name', 'seeds', 'mean_bandwidth'])
        df['weighted'] = df['mean_bandwidth'] * df['seeds']
        grouped = df.groupby(['class_id', 'name'], sort=True).agg(seeds=('seeds', 'sum'), weighted=('weighted', 'sum'))
        grouped['mean_bandwidth'] = grouped['weighted'] / grouped['seeds']
        # Seeds are counted once per iteration above
        iterations = df['iteration'].nunique()
        grouped['seeds'] = grouped['seeds'] // iterations
        return grouped.drop(columns='weighted').reset_index()


def report_row(report: PanopticReport, scheme: SemanticScheme, **labels) -> Dict:
    """
    Flatten a report into one table row

    Args:
        report: Panoptic report
        scheme: Scheme naming the things classes
        labels: Leading columns describing the run (method, parameter, ...)

    Returns:
        Dict with the labels, the aggregates and one RQ/PQ column pair per things class
    """
    row = dict(labels)
    row.update(report.aggregates)
    for metrics in report.classes:
        if metrics.kind == 'things':
            name = scheme.name(metrics.class_id)
            row[f'rq_{name}'] = metrics.rq
            row[f'pq_{name}'] = metrics.pq
    return row
