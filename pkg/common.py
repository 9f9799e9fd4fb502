"""
Common data structures used across the toolkit
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional

import numpy as np

from errors import ConfigurationError, SizeMismatchError


def _frozen_array(values, dtype, ndim: int, width: Optional[int] = None) -> np.ndarray:
    """Copy values into a read-only array of the given dtype and rank"""
    array = np.array(values, dtype=dtype, copy=True)
    if array.size == 0:
        shape = (0,) if ndim == 1 else (0, width or 0)
        array = array.reshape(shape)
    if array.ndim != ndim or (width is not None and array.shape[1] != width):
        expected = f"(M, {width})" if width else "(M,)"
        raise ValueError(f"Expected array of shape {expected}, got {array.shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PointCloud:
    """Raw points in the sensor frame with per-point intensity"""
    points: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        points = _frozen_array(self.points, np.float64, 2, 3)
        intensity = _frozen_array(self.intensity, np.float64, 1)
        if not np.all(np.isfinite(points)):
            raise ValueError("Point coordinates must be finite")
        if len(intensity) != len(points):
            raise SizeMismatchError(
                f"Intensity length {len(intensity)} does not match {len(points)} points"
            )
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'intensity', intensity)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SceneLabels:
    """Per-point semantic class and instance id (0 = no instance)"""
    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        semantic = _frozen_array(self.semantic, np.int64, 1)
        instance = _frozen_array(self.instance, np.int64, 1)
        if len(semantic) != len(instance):
            raise SizeMismatchError(
                f"Semantic length {len(semantic)} does not match instance length {len(instance)}"
            )
        if np.any(instance < 0):
            raise ValueError("Instance ids must be nonnegative")
        object.__setattr__(self, 'semantic', semantic)
        object.__setattr__(self, 'instance', instance)

    def __len__(self) -> int:
        return len(self.semantic)


@dataclass(frozen=True)
class SemanticScheme:
    """Class ids with names, split into things, stuff and ignored ids"""
    class_names: Dict[int, str]
    things: FrozenSet[int]
    stuff: FrozenSet[int]
    ignore: FrozenSet[int] = field(default_factory=frozenset)
    remap: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'things', frozenset(int(c) for c in self.things))
        object.__setattr__(self, 'stuff', frozenset(int(c) for c in self.stuff))
        object.__setattr__(self, 'ignore', frozenset(int(c) for c in self.ignore))
        object.__setattr__(self, 'class_names', {int(k): str(v) for k, v in self.class_names.items()})

        if self.things & self.stuff:
            raise ConfigurationError(f"Classes both things and stuff: {sorted(self.things & self.stuff)}")
        if self.ignore & (self.things | self.stuff):
            raise ConfigurationError(
                f"Ignored classes overlap things/stuff: {sorted(self.ignore & (self.things | self.stuff))}"
            )
        undeclared = (self.things | self.stuff | self.ignore) - set(self.class_names)
        if undeclared:
            raise ConfigurationError(f"Classes without a name: {sorted(undeclared)}")

    @property
    def evaluated_classes(self) -> List[int]:
        """Sorted ids of the classes that take part in metrics"""
        return sorted(self.things | self.stuff)

    def is_things(self, class_ids: Iterable[int]) -> np.ndarray:
        """Boolean mask of which class ids are things"""
        return np.isin(np.asarray(class_ids, dtype=np.int64), sorted(self.things))

    def name(self, class_id: int) -> str:
        return self.class_names.get(int(class_id), str(class_id))


@dataclass(frozen=True)
class InstanceSummary:
    """Ground-truth instance id, size and tight-box center"""
    instance_id: int
    point_count: int
    center: np.ndarray
    semantic: int = -1
    box_min: Optional[np.ndarray] = None
    box_max: Optional[np.ndarray] = None

    @property
    def diagonal(self) -> float:
        """Length of the tight-box diagonal in meters"""
        if self.box_min is None or self.box_max is None:
            return 0.0
        return float(np.linalg.norm(self.box_max - self.box_min))


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-point cluster ids (0 = noise) and the number of clusters"""
    labels: np.ndarray
    num_clusters: int

    def __post_init__(self):
        object.__setattr__(self, 'labels', _frozen_array(self.labels, np.int64, 1))

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls) -> 'ClusterAssignment':
        return cls(np.zeros(0, dtype=np.int64), 0)


@dataclass(frozen=True)
class ModeSet:
    """Converged mean-shift modes and their member counts"""
    modes: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class PanopticPrediction:
    """Per-point semantic class and instance id after fusion"""
    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        semantic = _frozen_array(self.semantic, np.int64, 1)
        instance = _frozen_array(self.instance, np.int64, 1)
        if len(semantic) != len(instance):
            raise SizeMismatchError(
                f"Semantic length {len(semantic)} does not match instance length {len(instance)}"
            )
        object.__setattr__(self, 'semantic', semantic)
        object.__setattr__(self, 'instance', instance)

    def __len__(self) -> int:
        return len(self.semantic)

    def as_labels(self) -> SceneLabels:
        return SceneLabels(self.semantic, self.instance)
