"""
Panoptic quality and mean IoU over per-frame segment matches
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from common import PanopticPrediction, SceneLabels, SemanticScheme
from data.semantic_scheme import check_known_classes
from errors import SceneIOError, SizeMismatchError

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5
AGGREGATE_KEYS = ('pq', 'pq_dagger', 'sq', 'rq', 'pq_th', 'sq_th', 'rq_th', 'pq_st', 'sq_st', 'rq_st', 'miou')
CLASS_COLUMNS = ('class_id', 'name', 'kind', 'tp', 'fp', 'fn', 'iou_sum', 'pq', 'sq', 'rq', 'iou')


@dataclass
class ClassMetrics:
    """Accumulated matches and derived scores of one class"""
    class_id: int
    name: str
    kind: str
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    pq: Optional[float] = None
    sq: Optional[float] = None
    rq: Optional[float] = None
    iou: Optional[float] = None

    @property
    def populated(self) -> bool:
        return self.tp + self.fp + self.fn > 0


@dataclass
class PanopticReport:
    """Per-class scores and unweighted aggregates (None when no class contributes)"""
    classes: List[ClassMetrics]
    aggregates: Dict[str, Optional[float]]
    frames: int = 0
    extra: Dict = field(default_factory=dict)

    def by_class(self, class_id: int) -> ClassMetrics:
        for metrics in self.classes:
            if metrics.class_id == class_id:
                return metrics
        raise KeyError(class_id)

    def to_dict(self) -> Dict:
        return {
            'frames': self.frames,
            'aggregates': dict(self.aggregates),
            'classes': {str(m.class_id): asdict(m) for m in self.classes},
            **self.extra,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_frame(self) -> pd.DataFrame:
        """Flat table: one row per class followed by an 'all' row with the aggregates"""
        rows = [{c: getattr(m, c) for c in CLASS_COLUMNS} for m in self.classes]
        df = pd.DataFrame(rows, columns=list(CLASS_COLUMNS))
        summary = pd.DataFrame([{'class_id': 'all', 'name': 'all', 'kind': 'all',
                                 **{k: self.aggregates[k] for k in AGGREGATE_KEYS}}])
        return pd.concat([df, summary], ignore_index=True)

    def save(self, json_path: Union[str, Path], csv_path: Optional[Union[str, Path]] = None):
        """Write the report as JSON and optionally as CSV"""
        try:
            Path(json_path).parent.mkdir(parents=True, exist_ok=True)
            Path(json_path).write_text(self.to_json(), encoding='utf-8')
            if csv_path is not None:
                self.to_frame().to_csv(csv_path, index=False)
        except OSError as e:
            raise SceneIOError(json_path, f"cannot write report: {e.strerror or e}")


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _segment_matches(gt_ids: np.ndarray, pred_ids: np.ndarray) -> Tuple[int, int, int, List[float]]:
    """
    Match segments of one class in one frame

    Args:
        gt_ids: Per-point GT segment id (0 = not in a GT segment of this class)
        pred_ids: Per-point predicted segment id (0 = not in a predicted segment)

    Returns:
        Tuple of (tp, fp, fn, IoUs of the matched pairs)
    """
    gt_segments, gt_areas = np.unique(gt_ids[gt_ids > 0], return_counts=True)
    pred_segments, pred_areas = np.unique(pred_ids[pred_ids > 0], return_counts=True)
    both = (gt_ids > 0) & (pred_ids > 0)
    if not np.any(both):
        return 0, len(pred_segments), len(gt_segments), []
    pairs, overlaps = np.unique(np.column_stack([gt_ids[both], pred_ids[both]]), axis=0, return_counts=True)

    gt_area = gt_areas[np.searchsorted(gt_segments, pairs[:, 0])]
    pred_area = pred_areas[np.searchsorted(pred_segments, pairs[:, 1])]
    ious = overlaps / (gt_area + pred_area - overlaps)
    matched = ious > MATCH_IOU
    tp = int(matched.sum())
    return tp, len(pred_segments) - tp, len(gt_segments) - tp, ious[matched].tolist()


class PanopticEvaluator:
    """Accumulates panoptic matches and semantic overlaps over frames"""

    def __init__(self, scheme: SemanticScheme):
        self.scheme = scheme
        self.class_ids = scheme.evaluated_classes
        self.logger = logging.getLogger(__name__)
        self.reset()

    def reset(self):
        n = len(self.class_ids)
        self.tp = np.zeros(n, dtype=np.int64)
        self.fp = np.zeros(n, dtype=np.int64)
        self.fn = np.zeros(n, dtype=np.int64)
        self.iou_sum = np.zeros(n, dtype=np.float64)
        self.intersection = np.zeros(n, dtype=np.int64)
        self.gt_points = np.zeros(n, dtype=np.int64)
        self.pred_points = np.zeros(n, dtype=np.int64)
        self.frames = 0

    def merge(self, other: 'PanopticEvaluator'):
        """Add the counts of another evaluator over the same scheme"""
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        self.intersection += other.intersection
        self.gt_points += other.gt_points
        self.pred_points += other.pred_points
        self.frames += other.frames

    def _kept(self, gt_semantic: np.ndarray, pred_semantic: np.ndarray, frame_id: Optional[str]) -> np.ndarray:
        if gt_semantic.shape != pred_semantic.shape:
            where = f"frame {frame_id}: " if frame_id else ""
            raise SizeMismatchError(
                f"{where}{len(pred_semantic)} predicted labels for {len(gt_semantic)} ground-truth points"
            )
        check_known_classes(gt_semantic, self.scheme, 'ground truth')
        check_known_classes(pred_semantic, self.scheme, 'predictions')
        return ~np.isin(gt_semantic, sorted(self.scheme.ignore))

    def add_semantic(self, gt_semantic: np.ndarray, pred_semantic: np.ndarray, frame_id: Optional[str] = None):
        """Accumulate per-class semantic overlaps of one frame"""
        gt_semantic = np.asarray(gt_semantic, dtype=np.int64)
        pred_semantic = np.asarray(pred_semantic, dtype=np.int64)
        kept = self._kept(gt_semantic, pred_semantic, frame_id)
        self._add_semantic(gt_semantic[kept], pred_semantic[kept])

    def _add_semantic(self, gt: np.ndarray, pred: np.ndarray):
        for k, class_id in enumerate(self.class_ids):
            gt_c = gt == class_id
            pred_c = pred == class_id
            self.intersection[k] += int(np.sum(gt_c & pred_c))
            self.gt_points[k] += int(gt_c.sum())
            self.pred_points[k] += int(pred_c.sum())

    def add_frame(self, gt: SceneLabels, pred: Union[PanopticPrediction, SceneLabels],
                  frame_id: Optional[str] = None):
        """
        Accumulate one frame

        Args:
            gt: Ground-truth labels
            pred: Panoptic prediction with the same point count
            frame_id: Used in error messages
        """
        kept = self._kept(gt.semantic, pred.semantic, frame_id)
        gt_sem, gt_inst = gt.semantic[kept], gt.instance[kept]
        pred_sem, pred_inst = pred.semantic[kept], pred.instance[kept]
        self._add_semantic(gt_sem, pred_sem)

        for k, class_id in enumerate(self.class_ids):
            gt_c = gt_sem == class_id
            pred_c = pred_sem == class_id
            if class_id in self.scheme.things:
                gt_ids = np.where(gt_c, gt_inst, 0)
                pred_ids = np.where(pred_c, pred_inst, 0)
            else:
                gt_ids = gt_c.astype(np.int64)
                pred_ids = pred_c.astype(np.int64)
            tp, fp, fn, ious = _segment_matches(gt_ids, pred_ids)
            self.tp[k] += tp
            self.fp[k] += fp
            self.fn[k] += fn
            self.iou_sum[k] += float(np.sum(ious))
        self.frames += 1

    def report(self) -> PanopticReport:
        """Per-class scores and aggregates of everything accumulated so far"""
        classes = []
        for k, class_id in enumerate(self.class_ids):
            metrics = ClassMetrics(
                class_id=class_id,
                name=self.scheme.name(class_id),
                kind='things' if class_id in self.scheme.things else 'stuff',
                tp=int(self.tp[k]), fp=int(self.fp[k]), fn=int(self.fn[k]),
                iou_sum=float(self.iou_sum[k]),
            )
            if metrics.populated:
                metrics.sq = metrics.iou_sum / metrics.tp if metrics.tp else 0.0
                metrics.rq = metrics.tp / (metrics.tp + 0.5 * metrics.fp + 0.5 * metrics.fn)
                metrics.pq = metrics.sq * metrics.rq
            union = self.gt_points[k] + self.pred_points[k] - self.intersection[k]
            if union > 0:
                metrics.iou = float(self.intersection[k] / union)
            classes.append(metrics)

        populated = [m for m in classes if m.populated]
        things = [m for m in populated if m.kind == 'things']
        stuff = [m for m in populated if m.kind == 'stuff']
        aggregates = {
            'pq': _mean([m.pq for m in populated]),
            'pq_dagger': _mean([m.pq for m in things] + [m.iou for m in stuff]),
            'sq': _mean([m.sq for m in populated]),
            'rq': _mean([m.rq for m in populated]),
            'pq_th': _mean([m.pq for m in things]),
            'sq_th': _mean([m.sq for m in things]),
            'rq_th': _mean([m.rq for m in things]),
            'pq_st': _mean([m.pq for m in stuff]),
            'sq_st': _mean([m.sq for m in stuff]),
            'rq_st': _mean([m.rq for m in stuff]),
            'miou': _mean([m.iou for m in classes]),
        }
        return PanopticReport(classes=classes, aggregates=aggregates, frames=self.frames)


def panoptic_quality(gt: Sequence[SceneLabels], pred: Sequence[Union[PanopticPrediction, SceneLabels]],
                     scheme: SemanticScheme) -> PanopticReport:
    """
    Dataset-level panoptic quality

    Args:
        gt: Ground-truth labels per frame
        pred: Predictions per frame, aligned with gt
        scheme: Semantic scheme

    Returns:
        PanopticReport
    """
    if len(gt) != len(pred):
        raise SizeMismatchError(f"{len(pred)} predicted frames for {len(gt)} ground-truth frames")
    evaluator = PanopticEvaluator(scheme)
    for i, (g, p) in enumerate(zip(gt, pred)):
        evaluator.add_frame(g, p, frame_id=str(i))
    return evaluator.report()


def miou(gt_semantic: Sequence[np.ndarray], pred_semantic: Sequence[np.ndarray],
         scheme: SemanticScheme) -> Tuple[Dict[int, Optional[float]], Optional[float]]:
    """
    Per-class IoU and their mean over classes present in gt or pred

    Args:
        gt_semantic: Ground-truth class ids per frame
        pred_semantic: Predicted class ids per frame
        scheme: Semantic scheme

    Returns:
        Tuple of (class id -> IoU or None when absent, mean IoU or None)
    """
    if len(gt_semantic) != len(pred_semantic):
        raise SizeMismatchError(f"{len(pred_semantic)} predicted frames for {len(gt_semantic)} ground-truth frames")
    evaluator = PanopticEvaluator(scheme)
    for i, (g, p) in enumerate(zip(gt_semantic, pred_semantic)):
        evaluator.add_semantic(g, p, frame_id=str(i))
    report = evaluator.report()
    return {m.class_id: m.iou for m in report.classes}, report.aggregates['miou']
