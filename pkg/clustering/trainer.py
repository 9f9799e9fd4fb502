"""
Training loop for dynamic-shifting heads
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from clustering.dynamic_shifting import (BandwidthBank, Head, IterationSchedule, LossReport, ds_backward,
                                         ds_loss, shift_seeds)
from clustering.optimizer import AdamHyper, AdamOptimizer
from clustering.weight_head import DEFAULT_DELTA_MIN, DEFAULT_HIDDEN_SIZES, build_head
from errors import ConfigurationError

logger = logging.getLogger(__name__)

STYLES = ('weighted', 'direct')


@dataclass(frozen=True)
class TrainingSample:
    """Things points of one scene with regressed and true centers"""
    points: np.ndarray
    features: np.ndarray
    centers: np.ndarray
    gt_centers: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters"""
    epochs: int = 20
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    style: str = 'weighted'
    hidden_sizes: Tuple[int, ...] = DEFAULT_HIDDEN_SIZES
    seed_count: int = 10000
    delta_min: float = DEFAULT_DELTA_MIN
    normalize_features: bool = True
    shuffle: bool = True

    def validate(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be nonnegative, got {self.epochs}")
        if self.style not in STYLES:
            raise ConfigurationError(f"Unknown training style '{self.style}'")
        if self.seed_count < 1:
            raise ConfigurationError("seed_count must be at least 1")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError(f"Invalid hidden sizes {self.hidden_sizes}")
        try:
            self.hyper()
        except ValueError as e:
            raise ConfigurationError(str(e))

    def hyper(self) -> AdamHyper:
        return AdamHyper(lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.epsilon)


@dataclass
class TrainingResult:
    """Trained head and the loss curve (row 0 = initial head, then one row per epoch)"""
    head: Head
    curve: List[LossReport] = field(default_factory=list)

    def curve_frame(self) -> pd.DataFrame:
        rows = []
        for epoch, report in enumerate(self.curve):
            row: Dict = {'epoch': epoch, 'loss': report.total}
            for i, value in enumerate(report.per_iteration, 1):
                row[f'l{i}'] = value
            rows.append(row)
        return pd.DataFrame(rows)


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    per_iteration = np.mean([r.per_iteration for r in reports], axis=0)
    return LossReport(per_iteration=tuple(float(v) for v in per_iteration),
                      total=float(np.mean([r.total for r in reports])))


class DynamicShiftTrainer:
    """Minimizes the mean dynamic-shifting loss over a set of scenes with Adam"""

    def __init__(self, config: TrainConfig, bank: BandwidthBank, schedule: IterationSchedule):
        config.validate()
        self.config = config
        self.bank = bank
        self.schedule = schedule
        self.logger = logging.getLogger(__name__)

    def _scene_seed(self, scene_position: int) -> int:
        return self.config.seed + scene_position

    def scene_loss(self, head: Head, sample: TrainingSample, scene_seed: int,
                   with_gradients: bool = False):
        """Loss of one scene, optionally with the parameter gradients"""
        trace = shift_seeds(sample.points, sample.features, sample.centers, self.schedule, self.bank,
                            head, self.config.seed_count, scene_seed)
        gt = sample.gt_centers[trace.seed_index]
        report = ds_loss(trace, gt, self.schedule)
        if not with_gradients:
            return report, None
        grads = ds_backward(trace, sample.features[trace.seed_index], head, self.bank, gt, self.schedule)
        return report, grads.parameters

    def evaluate(self, head: Head, samples: Sequence[TrainingSample]) -> LossReport:
        """Mean loss over the samples without updating the head"""
        return _mean_report([self.scene_loss(head, s, self._scene_seed(i))[0] for i, s in enumerate(samples)])

    def initial_head(self, samples: Sequence[TrainingSample]) -> Head:
        feature_dim = samples[0].features.shape[1]
        head = build_head(self.config.style, feature_dim, len(self.bank), self.config.hidden_sizes,
                          seed=self.config.seed, delta_min=self.config.delta_min)
        if self.config.normalize_features:
            head.fit_normalizer(np.vstack([s.features for s in samples]))
        return head

    def train(self, samples: Sequence[TrainingSample], head: Optional[Head] = None) -> TrainingResult:
        """
        Train a head

        Args:
            samples: Nonempty list of training scenes
            head: Head to continue from; a fresh one is built when omitted

        Returns:
            TrainingResult with the final head and loss curve
        """
        samples = [s for s in samples if len(s)]
        if not samples:
            raise ConfigurationError("Training needs at least one scene with things points")
        head = head.copy() if head is not None else self.initial_head(samples)
        optimizer = AdamOptimizer(self.config.hyper())
        rng = np.random.default_rng(self.config.seed)

        result = TrainingResult(head=head, curve=[self.evaluate(head, samples)])
        self.logger.info(f"Initial loss {result.curve[0].total:.4f} over {len(samples)} scenes")

        for epoch in range(1, self.config.epochs + 1):
            order = rng.permutation(len(samples)) if self.config.shuffle else np.arange(len(samples))
            reports = []
            for position in order:
                report, grads = self.scene_loss(head, samples[position], self._scene_seed(int(position)),
                                                with_gradients=True)
                reports.append(report)
                head.set_parameters(optimizer.step(head.parameters(), grads))
            epoch_report = _mean_report(reports)
            result.curve.append(epoch_report)
            self.logger.info(f"Epoch {epoch}/{self.config.epochs}: loss {epoch_report.total:.4f}")
        return result


def train(samples: Sequence[TrainingSample], config: TrainConfig,
          bank: Optional[BandwidthBank] = None,
          schedule: Optional[IterationSchedule] = None) -> TrainingResult:
    """
    Train a dynamic-shifting head on synthetic scenes

    Args:
        samples: Training scenes
        config: Training configuration
        bank: Bandwidth candidates, defaults to (0.2, 1.7, 3.2)
        schedule: Iteration schedule, defaults to 4 iterations

    Returns:
        TrainingResult
    """
    trainer = DynamicShiftTrainer(config, bank or BandwidthBank(), schedule or IterationSchedule())
    return trainer.train(samples)


def sample_from_scene(scene) -> TrainingSample:
    """TrainingSample from a SynthScene-like object with things points, features and centers"""
    return TrainingSample(points=scene.things_points, features=scene.features,
                          centers=scene.regressed_centers, gt_centers=scene.gt_centers)
