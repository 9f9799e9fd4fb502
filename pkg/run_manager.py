"""
Run manager coordinating generation, clustering, training, evaluation and analysis
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from analysis.bandwidth_analyzer import BandwidthAnalyzer, report_row
from analysis.fusion import consensus_fusion
from analysis.panoptic_metrics import PanopticEvaluator, PanopticReport
from clustering.dynamic_shifting import (BandwidthBank, FinalClusterConfig, Head, IterationSchedule, ds_forward,
                                         shift_seeds)
from clustering.heuristic import bfs_cluster, dbscan, mean_shift, relabel_first_touch
from clustering.model_io import load_head, save_head
from clustering.trainer import STYLES, DynamicShiftTrainer, TrainConfig, TrainingSample, sample_from_scene
from clustering.weight_head import build_head
from common import ClusterAssignment, PanopticPrediction, SceneLabels, SemanticScheme
from config.settings import Settings
from data.instances import centers_per_point, compute_instance_centers
from data.scene_generator import (SynthConfig, SynthScene, default_classes, density_profile, export_scene,
                                  gen_scene, point_features)
from data.scene_loader import SceneDataset, SceneFrame, read_labels, write_labels
from data.scene_validator import SceneValidator
from data.semantic_scheme import SEMANTIC_KITTI_SCHEME_PATH, load_scheme, synthetic_scheme
from errors import ConfigurationError, SceneIOError, SizeMismatchError

MODEL_FILE = 'model.dsw'
LOSS_CURVE_FILE = 'loss_curve.csv'
CLUSTER_REPORT_FILE = 'cluster_report.json'
TRAIN_REPORT_FILE = 'train_report.json'
ANALYSIS_TABLES = ('effective_bandwidth_by_class', 'bandwidth_by_iteration', 'density_profile',
                   'bandwidth_sweep', 'iteration_sweep', 'learning_style', 'clustering_comparison')


def resolve_scheme(name: str) -> SemanticScheme:
    """Built-in scheme by name, or a scheme file path"""
    if name == 'synthetic':
        return synthetic_scheme()
    if name == 'semantic_kitti':
        return load_scheme(SEMANTIC_KITTI_SCHEME_PATH)
    return load_scheme(name)


def synth_config(settings: Settings, seed: Optional[int] = None) -> SynthConfig:
    """Generator configuration from the [generation] section"""
    gen = settings.generation
    counts = {'vehicle-like': gen.VEHICLE_COUNT, 'cyclist-like': gen.CYCLIST_COUNT,
              'pedestrian-like': gen.PEDESTRIAN_COUNT}
    classes = tuple(replace(cls, count=counts[cls.name]) for cls in default_classes() if counts[cls.name] > 0)
    return SynthConfig(
        seed=settings.run.SEED if seed is None else seed,
        classes=classes,
        distance_range=(gen.DISTANCE_MIN, gen.DISTANCE_MAX),
        density_exponent=gen.DENSITY_EXPONENT,
        reference_distance=gen.REFERENCE_DISTANCE,
        surface_density=gen.SURFACE_DENSITY,
        noise_scale=gen.NOISE_SCALE,
        anisotropy=gen.ANISOTROPY,
        max_noise_diagonals=gen.MAX_NOISE_DIAGONALS,
        max_placement_retries=gen.MAX_PLACEMENT_RETRIES,
        ground_points=gen.GROUND_POINTS,
        building_walls=gen.BUILDING_WALLS,
        wall_points=gen.WALL_POINTS,
        clutter_points=gen.CLUTTER_POINTS,
    )


def bandwidth_bank(settings: Settings) -> BandwidthBank:
    return BandwidthBank(tuple(settings.dynamic_shifting.CANDIDATES))


def iteration_schedule(settings: Settings, iterations: Optional[int] = None) -> IterationSchedule:
    ds = settings.dynamic_shifting
    if iterations is not None and iterations != ds.ITERATIONS:
        return IterationSchedule(iterations=iterations, step_scale=ds.STEP_SCALE)
    return IterationSchedule(iterations=ds.ITERATIONS, step_scale=ds.STEP_SCALE,
                             loss_weights=tuple(ds.LOSS_WEIGHTS) or None)


def final_cluster_config(settings: Settings) -> FinalClusterConfig:
    cs = settings.clustering
    return FinalClusterConfig(
        algorithm=cs.FINAL_ALGORITHM,
        bandwidth=cs.FINAL_BANDWIDTH,
        radius=cs.FINAL_RADIUS,
        max_iters=cs.MEANSHIFT_MAX_ITERS,
        convergence_tol=cs.CONVERGENCE_TOL,
        merge_radius=cs.MERGE_RADIUS or None,
        min_instance_points=cs.MIN_INSTANCE_POINTS,
    )


def train_config(settings: Settings, epochs: Optional[int] = None) -> TrainConfig:
    tr = settings.training
    return TrainConfig(
        epochs=tr.EPOCHS if epochs is None else epochs,
        learning_rate=tr.LEARNING_RATE,
        beta1=tr.BETA1,
        beta2=tr.BETA2,
        epsilon=tr.EPSILON,
        seed=settings.run.SEED,
        style=tr.STYLE,
        hidden_sizes=tuple(settings.dynamic_shifting.HIDDEN_SIZES),
        seed_count=tr.SEED_COUNT,
        delta_min=settings.dynamic_shifting.DELTA_MIN,
        normalize_features=tr.NORMALIZE_FEATURES,
        shuffle=tr.SHUFFLE,
    )


def drop_small_clusters(assignment: ClusterAssignment, min_points: int) -> ClusterAssignment:
    """Set clusters with fewer than min_points members to 0 and renumber the rest"""
    if min_points <= 0 or assignment.num_clusters == 0:
        return assignment
    labels = assignment.labels
    small = np.bincount(labels) < min_points
    small[0] = True
    labels = np.where(small[labels], 0, labels)
    return relabel_first_touch(labels, labels > 0)


@dataclass
class FrameInputs:
    """Things points of one frame with their regressed centers and features"""
    index: np.ndarray
    points: np.ndarray
    features: np.ndarray
    centers: np.ndarray
    gt_centers: Optional[np.ndarray] = None

    def sample(self) -> TrainingSample:
        return TrainingSample(points=self.points, features=self.features, centers=self.centers,
                              gt_centers=self.gt_centers)


@dataclass
class ClusterModel:
    """Trained head with the candidates and schedule it was trained for"""
    head: Head
    bank: BandwidthBank
    schedule: IterationSchedule


class RunManager:
    """Runs the subcommands over a worker pool of frames"""

    def __init__(self, settings: Settings):
        self.settings = settings
        self.scheme = resolve_scheme(settings.run.SCHEME)
        self.validator = SceneValidator(self.scheme)
        self.logger = logging.getLogger(__name__)

    def _map_frames(self, func: Callable[[int], Any], count: int, what: str = 'frame') -> List[Any]:
        """
        Apply func to positions 0..count-1 in parallel

        Results come back in position order. When several positions fail,
        the error of the first failing position is raised.
        """
        results: List[Any] = [None] * count
        failures: Dict[int, Exception] = {}
        with ThreadPoolExecutor(max_workers=self.settings.run.JOBS) as executor:
            future_to_position = {executor.submit(func, position): position for position in range(count)}
            for future in as_completed(future_to_position):
                position = future_to_position[future]
                try:
                    results[position] = future.result()
                except Exception as e:
                    self.logger.error(f"Error processing {what} {position}: {e}")
                    failures[position] = e
        if failures:
            raise failures[min(failures)]
        return results

    def _path(self, key: str) -> Path:
        value = getattr(self.settings.run, key)
        if not value:
            raise ConfigurationError(f"run.{key.lower()} is required (--{key.lower()})")
        return Path(value)

    def _write_json(self, path: Path, payload: Dict):
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2), encoding='utf-8')
        except OSError as e:
            raise SceneIOError(path, f"cannot write report: {e.strerror or e}")

    def _write_csv(self, path: Path, frame: pd.DataFrame):
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=False)
        except OSError as e:
            raise SceneIOError(path, f"cannot write table: {e.strerror or e}")

    def _report_header(self) -> Dict:
        return {'seed': self.settings.run.SEED, 'config': self.settings.to_dict()}

    def frame_inputs(self, frame: SceneFrame) -> FrameInputs:
        """
        Things points of a frame and the inputs clustering runs on

        Frames with a sidecar use its things index, offsets and features.
        Without one, things points come from the semantic labels and are
        clustered on their raw positions with zero offsets.
        """
        cloud, labels = frame.cloud, frame.labels
        if frame.sidecar is not None:
            index = frame.sidecar.things_index
            points = cloud.points[index]
            centers = points + frame.sidecar.offsets
            features = frame.sidecar.features
        else:
            if labels is not None:
                index = np.flatnonzero(self.scheme.is_things(labels.semantic))
            else:
                self.logger.warning(f"Frame {frame.frame_id} has neither labels nor a sidecar; clustering all points")
                index = np.arange(len(cloud))
            points = cloud.points[index]
            centers = points.copy()
            features = point_features(points)
            self.logger.debug(f"Frame {frame.frame_id}: no sidecar, clustering {len(index)} raw things points")

        gt_centers = None
        if labels is not None:
            instance_ids = labels.instance[index]
            if np.all(instance_ids > 0):
                gt_centers = centers_per_point(instance_ids, compute_instance_centers(cloud, labels))
        return FrameInputs(index=np.asarray(index, dtype=np.int64), points=points, features=features,
                           centers=centers, gt_centers=gt_centers)

    def cluster_things(self, inputs: FrameInputs, algorithm: str, model: Optional[ClusterModel] = None,
                       seed: int = 0, bandwidth: Optional[float] = None) -> ClusterAssignment:
        """
        Cluster the things points of one frame

        Args:
            inputs: Frame inputs
            algorithm: bfs, dbscan, meanshift or dynshift
            model: Trained head, required for dynshift
            seed: Seed for FPS sampling
            bandwidth: Mean-shift bandwidth overriding the configured one

        Returns:
            ClusterAssignment over the things points
        """
        cs = self.settings.clustering
        if len(inputs.points) == 0:
            return ClusterAssignment.empty()
        if algorithm == 'dynshift':
            if model is None:
                raise ConfigurationError("dynshift needs a trained model (--model)")
            assignment, _ = ds_forward(inputs.points, inputs.features, inputs.centers, model.schedule, model.bank,
                                       model.head, final_cluster_config(self.settings), cs.SEED_COUNT, seed)
            return assignment
        if algorithm == 'bfs':
            assignment = bfs_cluster(inputs.centers, cs.BFS_RADIUS)
        elif algorithm == 'dbscan':
            assignment = dbscan(inputs.centers, cs.DBSCAN_EPS, cs.DBSCAN_MIN_PTS)
        elif algorithm == 'meanshift':
            bandwidth = bandwidth or cs.MEANSHIFT_BANDWIDTH
            assignment, _ = mean_shift(inputs.centers, bandwidth, max_iters=cs.MEANSHIFT_MAX_ITERS,
                                       convergence_tol=cs.CONVERGENCE_TOL, merge_radius=cs.MERGE_RADIUS or None,
                                       seed_count=cs.SEED_COUNT, seed=seed)
        else:
            raise ConfigurationError(f"Unknown clustering algorithm '{algorithm}'")
        return drop_small_clusters(assignment, cs.MIN_INSTANCE_POINTS)

    def _prediction(self, semantic: np.ndarray, index: np.ndarray, assignment: ClusterAssignment) -> PanopticPrediction:
        instance = np.zeros(len(semantic), dtype=np.int64)
        instance[index] = assignment.labels
        if self.settings.evaluation.FUSE:
            return consensus_fusion(semantic, instance, self.scheme)
        return PanopticPrediction(semantic=np.asarray(semantic, dtype=np.int64), instance=instance)

    def load_model(self) -> ClusterModel:
        head, bank, schedule = load_head(self._path('MODEL'))
        return ClusterModel(head=head, bank=bank, schedule=schedule)

    def generate_scenes(self, count: int, seed: int) -> List[SynthScene]:
        config = synth_config(self.settings, seed)
        return self._map_frames(lambda i: gen_scene(config, i), count, 'scene')

    def cmd_gen(self) -> Dict:
        """
        Generate synthetic scenes into the output directory

        Returns:
            Manifest dict (also written as manifest.json)
        """
        out = self._path('OUT')
        config = synth_config(self.settings)
        dataset = SceneDataset(out, self.scheme)
        count = self.settings.generation.SCENES

        def generate(position: int) -> Dict:
            frame_id = f"{position:06d}"
            scene = gen_scene(config, position)
            export_scene(dataset, frame_id, scene)
            return {'frame': frame_id, 'points': len(scene.cloud), 'things_points': len(scene.things_index),
                    'instances': len(scene.instances)}

        scenes = self._map_frames(generate, count, 'scene')
        manifest = {**self._report_header(), 'scenes': scenes, 'generator': config.to_dict()}
        self._write_json(out / SceneDataset.MANIFEST, manifest)
        self.logger.info(f"Generated {count} scenes in {out}")
        return manifest

    def cmd_cluster(self) -> Dict:
        """
        Cluster every frame of the data directory

        Returns:
            Report dict with per-frame timing (also written as cluster_report.json)
        """
        algorithm = self.settings.clustering.ALGORITHM
        model = self.load_model() if algorithm == 'dynshift' else None
        dataset = SceneDataset(self._path('DATA'), self.scheme)
        out = self._path('OUT')
        frame_ids = dataset.frame_ids()

        def cluster(position: int) -> Dict:
            frame_id = frame_ids[position]
            frame = dataset.load_frame(frame_id, with_labels=dataset.labels_path(frame_id).exists())
            inputs = self.frame_inputs(frame)
            start = time.perf_counter()
            assignment = self.cluster_things(inputs, algorithm, model, seed=self.settings.run.SEED + position)
            elapsed = time.perf_counter() - start

            instance = np.zeros(len(frame.cloud), dtype=np.int64)
            instance[inputs.index] = assignment.labels
            semantic = frame.labels.semantic if frame.labels is not None else np.zeros(len(frame.cloud), np.int64)
            write_labels(out / SceneDataset.PREDICTIONS_DIR / f"{frame_id}.label",
                         SceneLabels(semantic=semantic, instance=instance))
            self.logger.debug(f"Frame {frame_id}: {assignment.num_clusters} instances in {elapsed:.3f} s")
            return {'frame': frame_id, 'points': len(frame.cloud), 'things_points': len(inputs.index),
                    'instances': assignment.num_clusters, 'seconds': elapsed}

        frames = self._map_frames(cluster, len(frame_ids))
        seconds = np.array([f['seconds'] for f in frames], dtype=np.float64)
        report = {
            **self._report_header(),
            'algorithm': algorithm,
            'frames': frames,
            'timing': {
                'total_seconds': float(seconds.sum()),
                'mean_seconds': float(seconds.mean()) if len(seconds) else 0.0,
                'max_seconds': float(seconds.max()) if len(seconds) else 0.0,
            },
        }
        self._write_json(out / CLUSTER_REPORT_FILE, report)
        self.logger.info(f"Clustered {len(frames)} frames with {algorithm} in {seconds.sum():.2f} s")
        return report

    def training_samples(self) -> List[TrainingSample]:
        """Samples from the data directory, or freshly generated scenes when none is set"""
        if not self.settings.run.DATA:
            scenes = self.generate_scenes(self.settings.generation.SCENES, self.settings.run.SEED)
            return [sample_from_scene(scene) for scene in scenes]

        dataset = SceneDataset(self._path('DATA'), self.scheme)
        frame_ids = dataset.frame_ids()

        def load(position: int) -> TrainingSample:
            frame = dataset.load_frame(frame_ids[position])
            valid, problems = self.validator.validate_scene(frame.cloud, frame.labels)
            if not valid:
                self.logger.warning(f"Frame {frame_ids[position]}: {'; '.join(problems)}")
            inputs = self.frame_inputs(frame)
            keep = frame.labels.instance[inputs.index] > 0
            if not np.all(keep):
                self.logger.warning(f"Frame {frame_ids[position]}: {int((~keep).sum())} things points "
                                    f"without an instance id are left out of training")
                inputs = FrameInputs(index=inputs.index[keep], points=inputs.points[keep],
                                     features=inputs.features[keep], centers=inputs.centers[keep])
                inputs.gt_centers = centers_per_point(frame.labels.instance[inputs.index],
                                                      compute_instance_centers(frame.cloud, frame.labels))
            if inputs.gt_centers is None:
                inputs.gt_centers = np.zeros((0, 3))
            return inputs.sample()

        return self._map_frames(load, len(frame_ids))

    def train_head(self, samples: Sequence[TrainingSample], bank: BandwidthBank, schedule: IterationSchedule,
                   epochs: Optional[int] = None):
        trainer = DynamicShiftTrainer(train_config(self.settings, epochs), bank, schedule)
        return trainer.train(samples)

    def cmd_train(self) -> Dict:
        """
        Train a head and write the model file and loss curve

        Returns:
            Report dict (also written as train_report.json)
        """
        out = self._path('OUT')
        bank = bandwidth_bank(self.settings)
        schedule = iteration_schedule(self.settings)
        samples = self.training_samples()
        result = self.train_head(samples, bank, schedule)

        model_path = Path(self.settings.run.MODEL) if self.settings.run.MODEL else out / MODEL_FILE
        save_head(model_path, result.head, bank, schedule)
        self._write_csv(out / LOSS_CURVE_FILE, result.curve_frame())
        report = {
            **self._report_header(),
            'model': str(model_path),
            'scenes': len(samples),
            'initial_loss': result.curve[0].to_dict(),
            'final_loss': result.curve[-1].to_dict(),
        }
        self._write_json(out / TRAIN_REPORT_FILE, report)
        return report

    def _prediction_files(self, root: Path) -> Dict[str, Path]:
        pred_dir = root / SceneDataset.PREDICTIONS_DIR
        if not pred_dir.is_dir():
            pred_dir = root
        if not pred_dir.is_dir():
            raise SceneIOError(root, "prediction directory does not exist")
        return {p.stem: p for p in sorted(pred_dir.glob('*.label'))}

    def cmd_eval(self) -> PanopticReport:
        """
        Score predictions against ground truth

        Returns:
            PanopticReport (also written as <report_name>.json and .csv)
        """
        gt_root = self._path('GT' if self.settings.run.GT or not self.settings.run.DATA else 'DATA')
        gt = SceneDataset(gt_root, self.scheme)
        gt_ids = gt.frame_ids()
        predictions = self._prediction_files(self._path('PRED'))
        if len(predictions) != len(gt_ids):
            raise SizeMismatchError(f"{len(predictions)} prediction frames for {len(gt_ids)} ground-truth frames")
        missing = sorted(set(gt_ids) - set(predictions))
        if missing:
            raise SizeMismatchError(f"No predictions for frames {missing[:5]}")

        def evaluate(position: int) -> PanopticEvaluator:
            frame_id = gt_ids[position]
            labels = gt.load_labels(frame_id)
            pred = read_labels(predictions[frame_id], self.scheme)
            problems = self.validator.validate_prediction_alignment(labels, len(pred), frame_id)
            if problems:
                raise SizeMismatchError(problems[0])
            if self.settings.evaluation.FUSE:
                pred = consensus_fusion(pred.semantic, pred.instance, self.scheme)
            evaluator = PanopticEvaluator(self.scheme)
            evaluator.add_frame(labels, pred, frame_id)
            return evaluator

        total = PanopticEvaluator(self.scheme)
        for evaluator in self._map_frames(evaluate, len(gt_ids)):
            total.merge(evaluator)
        report = total.report()
        report.extra = {**self._report_header(), 'gt': str(gt_root), 'pred': self.settings.run.PRED,
                        'fused': self.settings.evaluation.FUSE}

        out = Path(self.settings.run.OUT or self.settings.run.PRED)
        name = self.settings.evaluation.REPORT_NAME
        report.save(out / f"{name}.json", out / f"{name}.csv")
        self.logger.info(f"Evaluated {report.frames} frames: PQ {report.aggregates['pq']}")
        return report

    def score_scenes(self, scenes: Sequence[SynthScene], algorithm: str, model: Optional[ClusterModel] = None,
                     bandwidth: Optional[float] = None) -> PanopticReport:
        """Panoptic quality of one clustering setup on generated scenes with ground-truth semantics"""

        def evaluate(position: int) -> PanopticEvaluator:
            scene = scenes[position]
            inputs = FrameInputs(index=scene.things_index, points=scene.things_points, features=scene.features,
                                 centers=scene.regressed_centers)
            assignment = self.cluster_things(inputs, algorithm, model, seed=self.settings.run.SEED + position,
                                             bandwidth=bandwidth)
            evaluator = PanopticEvaluator(self.scheme)
            evaluator.add_frame(scene.labels, self._prediction(scene.labels.semantic, scene.things_index, assignment),
                                str(scene.scene_index))
            return evaluator

        total = PanopticEvaluator(self.scheme)
        for evaluator in self._map_frames(evaluate, len(scenes), 'scene'):
            total.merge(evaluator)
        return total.report()

    def bandwidth_tables(self, scenes: Sequence[SynthScene], model: ClusterModel) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """Effective bandwidth per class, overall and per iteration"""
        analyzer = BandwidthAnalyzer(self.scheme, model.bank)
        seed_count = self.settings.clustering.SEED_COUNT
        for position, scene in enumerate(scenes):
            trace = shift_seeds(scene.things_points, scene.features, scene.regressed_centers, model.schedule,
                                model.bank, model.head, seed_count, self.settings.run.SEED + position)
            analyzer.add_trace(trace, scene.labels.semantic[scene.things_index][trace.seed_index])
        return analyzer.effective_bandwidth_by_class(), analyzer.bandwidth_by_iteration()

    def uniform_model(self, feature_dim: int) -> ClusterModel:
        """Zero-initialized head: equal weights on every candidate"""
        bank = bandwidth_bank(self.settings)
        head = build_head('weighted', feature_dim, len(bank), tuple(self.settings.dynamic_shifting.HIDDEN_SIZES),
                          seed=self.settings.run.SEED, zero_init=True)
        return ClusterModel(head=head, bank=bank, schedule=iteration_schedule(self.settings))

    def bandwidth_sweep(self, train: Sequence[TrainingSample], validation: Sequence[SynthScene]) -> pd.DataFrame:
        """Train and score one head per candidate set"""
        rows = []
        epochs = self.settings.analysis.SWEEP_EPOCHS
        schedule = iteration_schedule(self.settings)
        for candidates in self.settings.analysis.candidate_sets():
            bank = BandwidthBank(candidates)
            result = self.train_head(train, bank, schedule, epochs)
            report = self.score_scenes(validation, 'dynshift', ClusterModel(result.head, bank, schedule))
            label = ' '.join(f"{c:g}" for c in candidates)
            rows.append(report_row(report, self.scheme, candidates=label, final_loss=result.curve[-1].total))
            self.logger.info(f"Candidates ({label}): PQ {report.aggregates['pq']}")
        return pd.DataFrame(rows)

    def iteration_sweep(self, train: Sequence[TrainingSample], validation: Sequence[SynthScene]) -> pd.DataFrame:
        """Train and score one head per iteration count, with per-iteration validation losses"""
        rows = []
        epochs = self.settings.analysis.SWEEP_EPOCHS
        bank = bandwidth_bank(self.settings)
        validation_samples = [sample_from_scene(scene) for scene in validation]
        for iterations in self.settings.analysis.ITERATION_COUNTS:
            schedule = iteration_schedule(self.settings, iterations)
            result = self.train_head(train, bank, schedule, epochs)
            trainer = DynamicShiftTrainer(train_config(self.settings, epochs), bank, schedule)
            losses = trainer.evaluate(result.head, [s for s in validation_samples if len(s)])
            report = self.score_scenes(validation, 'dynshift', ClusterModel(result.head, bank, schedule))
            row = report_row(report, self.scheme, iterations=iterations, loss=losses.total)
            row.update({f'l{i}': value for i, value in enumerate(losses.per_iteration, 1)})
            rows.append(row)
            self.logger.info(f"{iterations} iterations: PQ {report.aggregates['pq']}, loss {losses.total:.4f}")
        return pd.DataFrame(rows)

    def learning_style(self, train: Sequence[TrainingSample], validation: Sequence[SynthScene]) -> pd.DataFrame:
        """Train a weighted head and a direct-regression head on the same scenes and score both"""
        rows = []
        bank = bandwidth_bank(self.settings)
        schedule = iteration_schedule(self.settings)
        config = train_config(self.settings, self.settings.analysis.SWEEP_EPOCHS)
        for style in STYLES:
            result = DynamicShiftTrainer(replace(config, style=style), bank, schedule).train(train)
            report = self.score_scenes(validation, 'dynshift', ClusterModel(result.head, bank, schedule))
            rows.append(report_row(report, self.scheme, style=style, final_loss=result.curve[-1].total))
            self.logger.info(f"{style} head: PQ {report.aggregates['pq']}, PQ^Th {report.aggregates['pq_th']}")
        return pd.DataFrame(rows)

    def clustering_comparison(self, validation: Sequence[SynthScene], model: ClusterModel) -> pd.DataFrame:
        """Every heuristic in place of dynamic shifting, mean shift over the bandwidth grid"""
        cs = self.settings.clustering
        setups = [('bfs', cs.BFS_RADIUS, None), ('dbscan', cs.DBSCAN_EPS, None)]
        setups += [('meanshift', bandwidth, bandwidth) for bandwidth in self.settings.analysis.BANDWIDTH_GRID]
        rows = []
        for algorithm, parameter, bandwidth in setups:
            report = self.score_scenes(validation, algorithm, bandwidth=bandwidth)
            rows.append(report_row(report, self.scheme, method=algorithm, parameter=parameter))
        report = self.score_scenes(validation, 'dynshift', model)
        rows.append(report_row(report, self.scheme, method='dynshift',
                               parameter=' '.join(f"{c:g}" for c in model.bank.candidates)))
        return pd.DataFrame(rows)

    def cmd_analyze(self) -> Dict[str, pd.DataFrame]:
        """
        Write the analysis tables as CSV files in the output directory

        Training scenes use the run seed; validation scenes are generated with
        the seed shifted by analysis.validation_seed_offset. Without a model
        the bandwidth tables describe a uniform head.

        Returns:
            Table name -> DataFrame
        """
        out = self._path('OUT')
        analysis = self.settings.analysis
        validation = self.generate_scenes(analysis.VALIDATION_SCENES,
                                          self.settings.run.SEED + analysis.VALIDATION_SEED_OFFSET)
        train = [s for s in self.training_samples() if len(s)]

        if self.settings.run.MODEL:
            model = self.load_model()
        else:
            self.logger.warning("No model given; bandwidth tables describe a uniform head")
            model = self.uniform_model(validation[0].features.shape[1])

        by_class, by_iteration = self.bandwidth_tables(validation, model)
        tables = {
            'effective_bandwidth_by_class': by_class,
            'bandwidth_by_iteration': by_iteration,
            'density_profile': density_profile(validation, analysis.PROFILE_BIN_WIDTH),
            'bandwidth_sweep': self.bandwidth_sweep(train, validation),
            'iteration_sweep': self.iteration_sweep(train, validation),
            'learning_style': self.learning_style(train, validation),
            'clustering_comparison': self.clustering_comparison(validation, model),
        }
        for name in ANALYSIS_TABLES:
            self._write_csv(out / f"{name}.csv", tables[name])
        self._write_json(out / 'analysis_report.json', {**self._report_header(),
                                                       'tables': [f"{name}.csv" for name in ANALYSIS_TABLES]})
        self.logger.info(f"Wrote {len(tables)} analysis tables to {out}")
        return tables

    def run(self, command: str):
        """Dispatch a subcommand by name"""
        handlers = {
            'gen': self.cmd_gen,
            'cluster': self.cmd_cluster,
            'train': self.cmd_train,
            'eval': self.cmd_eval,
            'analyze': self.cmd_analyze,
        }
        if command not in handlers:
            raise ConfigurationError(f"Unknown command '{command}'")
        return handlers[command]()
