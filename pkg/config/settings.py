"""
Run settings and configuration files
"""
import configparser
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from errors import ConfigurationError, SceneIOError

ALGORITHMS = ('bfs', 'dbscan', 'meanshift', 'dynshift')


@dataclass
class RunSettings:
    """Paths, seeds and worker count shared by every subcommand"""

    SEED: int = 0
    JOBS: int = 1
    SCHEME: str = 'synthetic'  # 'synthetic', 'semantic_kitti' or a path to a scheme file
    DATA: str = ''
    OUT: str = ''
    MODEL: str = ''
    GT: str = ''
    PRED: str = ''

    def validate(self) -> List[str]:
        problems = []
        if self.SEED < 0:
            problems.append("run.seed must be nonnegative")
        if self.JOBS < 1:
            problems.append("run.jobs must be at least 1")
        return problems


@dataclass
class GenerationSettings:
    """Synthetic scene generation"""

    SCENES: int = 10
    DISTANCE_MIN: float = 5.0
    DISTANCE_MAX: float = 35.0
    DENSITY_EXPONENT: float = 2.0
    REFERENCE_DISTANCE: float = 10.0
    SURFACE_DENSITY: float = 20.0
    NOISE_SCALE: float = 0.15
    ANISOTROPY: float = 5.0
    MAX_NOISE_DIAGONALS: float = 2.0
    VEHICLE_COUNT: int = 4
    CYCLIST_COUNT: int = 4
    PEDESTRIAN_COUNT: int = 6
    GROUND_POINTS: int = 1500
    BUILDING_WALLS: int = 2
    WALL_POINTS: int = 400
    CLUTTER_POINTS: int = 40
    MAX_PLACEMENT_RETRIES: int = 200

    def validate(self) -> List[str]:
        problems = []
        if self.SCENES < 1:
            problems.append("generation.scenes must be at least 1")
        if not 0 < self.DISTANCE_MIN <= self.DISTANCE_MAX:
            problems.append("generation.distance_min/max must satisfy 0 < min <= max")
        if self.DENSITY_EXPONENT < 0:
            problems.append("generation.density_exponent must be nonnegative")
        if self.NOISE_SCALE < 0:
            problems.append("generation.noise_scale must be nonnegative")
        if self.ANISOTROPY < 1:
            problems.append("generation.anisotropy must be at least 1")
        if min(self.VEHICLE_COUNT, self.CYCLIST_COUNT, self.PEDESTRIAN_COUNT) < 0:
            problems.append("generation instance counts must be nonnegative")
        if self.VEHICLE_COUNT + self.CYCLIST_COUNT + self.PEDESTRIAN_COUNT == 0:
            problems.append("generation needs at least one instance per scene")
        return problems


@dataclass
class ClusteringSettings:
    """Clustering algorithm choice and heuristic parameters"""

    ALGORITHM: str = 'dynshift'
    BFS_RADIUS: float = 1.2
    DBSCAN_EPS: float = 0.6
    DBSCAN_MIN_PTS: int = 5
    MEANSHIFT_BANDWIDTH: float = 0.65
    MEANSHIFT_MAX_ITERS: int = 100
    CONVERGENCE_TOL: float = 1e-4
    MERGE_RADIUS: float = 0.0  # 0 = half the bandwidth
    SEED_COUNT: int = 10000
    FINAL_ALGORITHM: str = 'meanshift'
    FINAL_BANDWIDTH: float = 0.65
    FINAL_RADIUS: float = 1.2
    MIN_INSTANCE_POINTS: int = 50

    def validate(self) -> List[str]:
        problems = []
        if self.ALGORITHM not in ALGORITHMS:
            problems.append(
                f"clustering.algorithm '{self.ALGORITHM}' is not one of {', '.join(ALGORITHMS)} "
                f"(hdbscan is not available)"
            )
        if self.FINAL_ALGORITHM not in ('meanshift', 'bfs'):
            problems.append("clustering.final_algorithm must be meanshift or bfs")
        for name in ('BFS_RADIUS', 'DBSCAN_EPS', 'MEANSHIFT_BANDWIDTH', 'FINAL_BANDWIDTH', 'FINAL_RADIUS'):
            if getattr(self, name) <= 0:
                problems.append(f"clustering.{name.lower()} must be positive")
        if self.DBSCAN_MIN_PTS < 1:
            problems.append("clustering.dbscan_min_pts must be at least 1")
        if self.MEANSHIFT_MAX_ITERS < 1:
            problems.append("clustering.meanshift_max_iters must be at least 1")
        if self.MERGE_RADIUS < 0:
            problems.append("clustering.merge_radius must be nonnegative")
        if self.SEED_COUNT < 1:
            problems.append("clustering.seed_count must be at least 1")
        if self.MIN_INSTANCE_POINTS < 0:
            problems.append("clustering.min_instance_points must be nonnegative")
        return problems


@dataclass
class DynamicShiftingSettings:
    """Bandwidth candidates, iteration schedule and head architecture"""

    CANDIDATES: Tuple[float, ...] = (0.2, 1.7, 3.2)
    ITERATIONS: int = 4
    STEP_SCALE: float = 1.0
    LOSS_WEIGHTS: Tuple[float, ...] = ()  # empty = 1 for every iteration
    HIDDEN_SIZES: Tuple[int, ...] = (64, 64)
    DELTA_MIN: float = 0.05

    def validate(self) -> List[str]:
        problems = []
        if not self.CANDIDATES or any(c <= 0 for c in self.CANDIDATES):
            problems.append("dynamic_shifting.candidates must be positive")
        elif any(b <= a for a, b in zip(self.CANDIDATES, self.CANDIDATES[1:])):
            problems.append("dynamic_shifting.candidates must be strictly increasing")
        if self.ITERATIONS < 1:
            problems.append("dynamic_shifting.iterations must be at least 1")
        if self.STEP_SCALE < 0:
            problems.append("dynamic_shifting.step_scale must be nonnegative")
        if self.LOSS_WEIGHTS and len(self.LOSS_WEIGHTS) != self.ITERATIONS:
            problems.append("dynamic_shifting.loss_weights needs one weight per iteration")
        if any(w < 0 for w in self.LOSS_WEIGHTS):
            problems.append("dynamic_shifting.loss_weights must be nonnegative")
        if not self.HIDDEN_SIZES or any(h < 1 for h in self.HIDDEN_SIZES):
            problems.append("dynamic_shifting.hidden_sizes must be positive")
        if self.DELTA_MIN <= 0:
            problems.append("dynamic_shifting.delta_min must be positive")
        return problems


@dataclass
class TrainingSettings:
    """Optimizer and epoch settings"""

    EPOCHS: int = 20
    LEARNING_RATE: float = 1e-3
    BETA1: float = 0.9
    BETA2: float = 0.999
    EPSILON: float = 1e-8
    STYLE: str = 'weighted'  # 'weighted' or 'direct'
    SEED_COUNT: int = 1000
    NORMALIZE_FEATURES: bool = True
    SHUFFLE: bool = True

    def validate(self) -> List[str]:
        problems = []
        if self.EPOCHS < 0:
            problems.append("training.epochs must be nonnegative")
        if self.LEARNING_RATE < 0:
            problems.append("training.learning_rate must be nonnegative")
        if not (0 <= self.BETA1 < 1 and 0 <= self.BETA2 < 1) or self.EPSILON <= 0:
            problems.append("training.beta1/beta2 must lie in [0, 1) and epsilon must be positive")
        if self.STYLE not in ('weighted', 'direct'):
            problems.append("training.style must be weighted or direct")
        if self.SEED_COUNT < 1:
            problems.append("training.seed_count must be at least 1")
        return problems


@dataclass
class EvaluationSettings:
    """Panoptic evaluation"""

    FUSE: bool = True
    REPORT_NAME: str = 'report'

    def validate(self) -> List[str]:
        return [] if self.REPORT_NAME else ["evaluation.report_name must not be empty"]


@dataclass
class AnalysisSettings:
    """Analysis tables and sweeps"""

    VALIDATION_SCENES: int = 20
    VALIDATION_SEED_OFFSET: int = 100000
    PROFILE_BIN_WIDTH: float = 5.0
    BANDWIDTH_GRID: Tuple[float, ...] = (0.2, 0.65, 1.2, 1.7, 3.2)
    CANDIDATE_SETS: Tuple[str, ...] = ('0.2 1.1 2.0', '0.2 1.7 3.2', '0.2 2.1 4.0')
    ITERATION_COUNTS: Tuple[int, ...] = (1, 2, 3, 4)
    SWEEP_EPOCHS: int = 5

    def validate(self) -> List[str]:
        problems = []
        if self.VALIDATION_SCENES < 1:
            problems.append("analysis.validation_scenes must be at least 1")
        if self.PROFILE_BIN_WIDTH <= 0:
            problems.append("analysis.profile_bin_width must be positive")
        if any(b <= 0 for b in self.BANDWIDTH_GRID):
            problems.append("analysis.bandwidth_grid must be positive")
        try:
            self.candidate_sets()
        except ValueError:
            problems.append("analysis.candidate_sets must be lists of numbers separated by ';'")
        if any(i < 1 for i in self.ITERATION_COUNTS):
            problems.append("analysis.iteration_counts must be positive")
        if self.SWEEP_EPOCHS < 0:
            problems.append("analysis.sweep_epochs must be nonnegative")
        return problems

    def candidate_sets(self) -> List[Tuple[float, ...]]:
        return [tuple(float(v) for v in entry.replace(',', ' ').split()) for entry in self.CANDIDATE_SETS]


SECTIONS = {
    'run': RunSettings,
    'generation': GenerationSettings,
    'clustering': ClusteringSettings,
    'dynamic_shifting': DynamicShiftingSettings,
    'training': TrainingSettings,
    'evaluation': EvaluationSettings,
    'analysis': AnalysisSettings,
}

# Tuple-of-string keys are separated by ';', numeric tuples by ',' or whitespace
_STRING_LIST_SEPARATOR = ';'


def _coerce(section: str, key: str, value: Any, annotation) -> Any:
    """Convert a raw INI string or JSON value to the field's declared type"""
    where = f"{section}.{key.lower()}"
    try:
        if typing.get_origin(annotation) is tuple:
            item_type = typing.get_args(annotation)[0]
            if isinstance(value, str):
                if item_type is str:
                    items = [v.strip() for v in value.split(_STRING_LIST_SEPARATOR) if v.strip()]
                else:
                    items = value.replace(',', ' ').split()
            else:
                items = list(value)
            return tuple(item_type(v) for v in items)
        if annotation is bool:
            if isinstance(value, bool):
                return value
            lowered = str(value).strip().lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(value)
        if annotation is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if annotation is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{where}: cannot interpret '{value}'")


@dataclass
class Settings:
    """All configuration sections of a run"""

    run: RunSettings = field(default_factory=RunSettings)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    clustering: ClusteringSettings = field(default_factory=ClusteringSettings)
    dynamic_shifting: DynamicShiftingSettings = field(default_factory=DynamicShiftingSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def apply(self, values: Dict[str, Dict[str, Any]]):
        """
        Overwrite fields from nested {section: {key: value}} data

        Keys are case-insensitive; unknown sections or keys are errors.
        """
        for section, entries in values.items():
            section = section.lower()
            if section not in SECTIONS:
                raise ConfigurationError(f"Unknown configuration section [{section}]")
            target = getattr(self, section)
            hints = typing.get_type_hints(type(target))
            known = {f.name for f in fields(target)}
            for key, value in entries.items():
                name = key.upper()
                if name not in known:
                    raise ConfigurationError(f"Unknown configuration key {section}.{key.lower()}")
                setattr(target, name, _coerce(section, name, value, hints[name]))

    def validate(self) -> bool:
        """Raise ConfigurationError listing every invalid value"""
        problems = []
        for section in SECTIONS:
            problems.extend(getattr(self, section).validate())
        if problems:
            raise ConfigurationError('; '.join(problems))
        return True

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Snapshot with lower-case keys, as embedded in run reports"""
        return {
            section: {k.lower(): (list(v) if isinstance(v, tuple) else v)
                      for k, v in asdict(getattr(self, section)).items()}
            for section in SECTIONS
        }

    def save_to_file(self, filepath: Union[str, Path]):
        """Save settings to a JSON file"""
        try:
            with open(filepath, 'w') as f:
                json.dump({'config': self.to_dict()}, f, indent=2)
        except OSError as e:
            raise SceneIOError(filepath, f"cannot write settings: {e.strerror or e}")

    @classmethod
    def load_from_file(cls, filepath: Union[str, Path]) -> 'Settings':
        """
        Load settings from an INI file or from the JSON of a run report

        Args:
            filepath: Path to the file

        Returns:
            Settings with file values over the defaults
        """
        filepath = Path(filepath)
        try:
            text = filepath.read_text(encoding='utf-8')
        except OSError as e:
            raise SceneIOError(filepath, f"cannot read configuration: {e.strerror or e}")

        settings = cls()
        if text.lstrip().startswith('{'):
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{filepath}: invalid JSON: {e}")
            settings.apply(data.get('config', data))
            return settings

        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=str(filepath))
        except configparser.Error as e:
            raise ConfigurationError(f"{filepath}: {e}")
        settings.apply({section: dict(parser.items(section)) for section in parser.sections()})
        return settings

    @classmethod
    def resolve(cls, config_path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> 'Settings':
        """Defaults, then the config file, then command-line overrides; validated"""
        settings = cls.load_from_file(config_path) if config_path else cls()
        if overrides:
            settings.apply({s: {k: v for k, v in entries.items() if v is not None}
                            for s, entries in overrides.items()})
        settings.validate()
        return settings
