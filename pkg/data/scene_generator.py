"""
Synthetic LiDAR-like scenes with distance-dependent density and strip-shaped
regressed-center noise
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from clustering.spatial_index import build_index
from common import InstanceSummary, PointCloud, SceneLabels
from data.instances import centers_per_point, compute_instance_centers
from data.scene_loader import SceneDataset, SceneSidecar, write_scene, write_sidecar
from data.semantic_scheme import BUILDING, CYCLIST_LIKE, PEDESTRIAN_LIKE, ROAD, UNLABELED, VEHICLE_LIKE
from errors import ConfigurationError, PlacementError

logger = logging.getLogger(__name__)

SENSOR_POSITION = np.array([0.0, 0.0, 1.8])
GROUND_HEIGHT = 0.0
FEATURE_NAMES = ('distance', 'count_0_5m', 'count_2m', 'eig_ratio_21', 'eig_ratio_31', 'height', 'offset_norm')
FEATURE_DIM = len(FEATURE_NAMES)
LOCAL_RADII = (0.5, 2.0)
PROFILE_VOXEL_SIZE = 0.2

# Unit faces of a box centered at the origin: (normal axis, sign)
_FACES = [(axis, sign) for axis in range(3) for sign in (-1.0, 1.0)]


@dataclass(frozen=True)
class SynthClass:
    """One things class of the generator menu; extents are size * aspect"""
    class_id: int
    name: str
    size_range: Tuple[float, float]
    count: int
    aspect: Tuple[float, float, float] = (1.0, 1.0, 1.0)


def default_classes() -> Tuple[SynthClass, ...]:
    return (
        SynthClass(VEHICLE_LIKE, 'vehicle-like', (3.5, 5.0), 4, (1.0, 0.42, 0.33)),
        SynthClass(CYCLIST_LIKE, 'cyclist-like', (1.5, 2.0), 4, (1.0, 0.35, 0.9)),
        SynthClass(PEDESTRIAN_LIKE, 'pedestrian-like', (0.4, 0.8), 6, (1.0, 1.0, 2.8)),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Generator parameters; every scene is a pure function of (seed, scene index)"""
    seed: int = 0
    classes: Tuple[SynthClass, ...] = field(default_factory=default_classes)
    distance_range: Tuple[float, float] = (5.0, 35.0)
    density_exponent: float = 2.0
    reference_distance: float = 10.0
    surface_density: float = 20.0  # points per m^2 at the reference distance
    noise_scale: float = 0.15
    anisotropy: float = 5.0
    max_noise_diagonals: float = 2.0
    placement_gap: float = 0.5
    max_placement_retries: int = 200
    ground_points: int = 1500
    building_walls: int = 2
    wall_points: int = 400
    clutter_points: int = 40

    def validate(self):
        """Raise ConfigurationError on invalid parameters"""
        if not self.classes:
            raise ConfigurationError("Generator needs at least one things class")
        for cls in self.classes:
            lo, hi = cls.size_range
            if not 0 < lo <= hi:
                raise ConfigurationError(f"{cls.name}: invalid size range {cls.size_range}")
            if cls.count < 1:
                raise ConfigurationError(f"{cls.name}: instance count must be positive")
            if any(a <= 0 for a in cls.aspect):
                raise ConfigurationError(f"{cls.name}: aspect ratios must be positive")
        lo, hi = self.distance_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"Invalid distance range {self.distance_range}")
        if self.density_exponent < 0:
            raise ConfigurationError("Density exponent must be nonnegative")
        if self.reference_distance <= 0 or self.surface_density <= 0:
            raise ConfigurationError("Reference distance and surface density must be positive")
        if self.noise_scale < 0 or self.anisotropy < 1 or self.max_noise_diagonals <= 0:
            raise ConfigurationError("Noise scale >= 0, anisotropy >= 1 and a positive clip are required")
        if self.max_placement_retries < 1:
            raise ConfigurationError("max_placement_retries must be at least 1")
        if min(self.ground_points, self.building_walls, self.wall_points, self.clutter_points) < 0:
            raise ConfigurationError("Stuff point counts must be nonnegative")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SynthScene:
    """A generated scene with simulated regressed offsets and features of its things points"""
    scene_index: int
    cloud: PointCloud
    labels: SceneLabels
    things_index: np.ndarray
    offsets: np.ndarray
    regressed_centers: np.ndarray
    features: np.ndarray
    instances: List[InstanceSummary]

    @property
    def things_points(self) -> np.ndarray:
        return self.cloud.points[self.things_index]

    @property
    def things_instance_ids(self) -> np.ndarray:
        return self.labels.instance[self.things_index]

    @property
    def gt_centers(self) -> np.ndarray:
        """True center of every things point's instance"""
        return centers_per_point(self.things_instance_ids, self.instances)

    def sidecar(self) -> SceneSidecar:
        return SceneSidecar(things_index=self.things_index, offsets=self.offsets, features=self.features)


def _density_factor(distance: float, config: SynthConfig) -> float:
    return (config.reference_distance / max(distance, 1e-6)) ** config.density_exponent


def _sample_box_surface(rng: np.random.Generator, extents: np.ndarray, count: int) -> np.ndarray:
    """Uniform samples on the surface of an origin-centered box"""
    areas = np.array([np.prod(np.delete(extents, axis)) for axis, _ in _FACES])
    faces = rng.choice(len(_FACES), size=count, p=areas / areas.sum())
    samples = (rng.random((count, 3)) - 0.5) * extents
    for face, (axis, sign) in enumerate(_FACES):
        on_face = faces == face
        samples[on_face, axis] = sign * extents[axis] / 2.0
    return samples


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _place_instances(rng: np.random.Generator, config: SynthConfig,
                     scene_index: int) -> List[Tuple[SynthClass, np.ndarray, np.ndarray, float, float]]:
    """Draw (class, center, extents, yaw, size) for every instance without footprint overlap"""
    placed: List[Tuple[SynthClass, np.ndarray, np.ndarray, float, float]] = []
    footprints: List[Tuple[np.ndarray, float]] = []
    lo, hi = config.distance_range
    for cls in config.classes:
        for _ in range(cls.count):
            size = rng.uniform(*cls.size_range)
            extents = size * np.asarray(cls.aspect, dtype=np.float64)
            radius = 0.5 * float(np.hypot(extents[0], extents[1]))
            for _attempt in range(config.max_placement_retries):
                distance = rng.uniform(lo, hi)
                azimuth = rng.uniform(-np.pi, np.pi)
                xy = distance * np.array([np.cos(azimuth), np.sin(azimuth)])
                if all(np.linalg.norm(xy - other) > radius + other_radius + config.placement_gap
                       for other, other_radius in footprints):
                    break
            else:
                raise PlacementError(
                    f"Scene {scene_index}: could not place a {cls.name} instance after "
                    f"{config.max_placement_retries} attempts"
                )
            yaw = rng.uniform(-np.pi, np.pi)
            center = np.array([xy[0], xy[1], GROUND_HEIGHT + extents[2] / 2.0])
            footprints.append((xy, radius))
            placed.append((cls, center, extents, yaw, size))
    return placed


def _ground_points(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    """Ground-plane points whose radial density decays like the instances'"""
    if config.ground_points == 0:
        return np.zeros((0, 3))
    inner = 1.0
    outer = config.distance_range[1] + 5.0
    accepted = []
    total = 0
    while total < config.ground_points:
        batch = 4 * config.ground_points
        rho = np.sqrt(rng.uniform(inner ** 2, outer ** 2, size=batch))
        keep = rng.random(batch) < (inner / rho) ** config.density_exponent
        rho = rho[keep]
        accepted.append(rho)
        total += len(rho)
    rho = np.concatenate(accepted)[:config.ground_points]
    azimuth = rng.uniform(-np.pi, np.pi, size=len(rho))
    return np.column_stack([rho * np.cos(azimuth), rho * np.sin(azimuth), np.full(len(rho), GROUND_HEIGHT)])


def _wall_points(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    """Vertical building walls beyond the instance ring"""
    walls = []
    distance = config.distance_range[1] + 8.0
    for _ in range(config.building_walls):
        azimuth = rng.uniform(-np.pi, np.pi)
        normal = np.array([np.cos(azimuth), np.sin(azimuth)])
        tangent = np.array([-normal[1], normal[0]])
        along = rng.uniform(-7.5, 7.5, size=config.wall_points)
        height = rng.uniform(0.0, 6.0, size=config.wall_points)
        xy = distance * normal + along[:, None] * tangent
        walls.append(np.column_stack([xy, GROUND_HEIGHT + height]))
    if not walls:
        return np.zeros((0, 3))
    return np.vstack(walls)


def _strip_noise(rng: np.random.Generator, center: np.ndarray, size: float, diagonal: float,
                 count: int, config: SynthConfig) -> np.ndarray:
    """Gaussian noise elongated along the sensor ray through the instance center"""
    if config.noise_scale == 0 or count == 0:
        return np.zeros((count, 3))
    ray = center - SENSOR_POSITION
    ray = ray / np.linalg.norm(ray)
    helper = np.array([0.0, 0.0, 1.0]) if abs(ray[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    side = np.cross(ray, helper)
    side /= np.linalg.norm(side)
    up = np.cross(ray, side)

    sigma_ray = config.noise_scale * size
    sigma_perp = sigma_ray / config.anisotropy
    noise = (rng.normal(0.0, sigma_ray, size=(count, 1)) * ray
             + rng.normal(0.0, sigma_perp, size=(count, 1)) * side
             + rng.normal(0.0, sigma_perp, size=(count, 1)) * up)
    limit = config.max_noise_diagonals * diagonal
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    return np.where(norms > limit, noise * (limit / np.maximum(norms, 1e-12)), noise)


def _as_float32_grid(points: np.ndarray) -> np.ndarray:
    """Round coordinates to the float32 values the binary point format stores"""
    return points.astype(np.float32).astype(np.float64)


def gen_scene(config: SynthConfig, scene_index: int) -> SynthScene:
    """
    Generate one synthetic scene

    Args:
        config: Generator configuration
        scene_index: Index of the scene within the set

    Returns:
        SynthScene, bitwise identical for the same (config, scene_index)
    """
    config.validate()
    rng = np.random.default_rng([config.seed, scene_index])

    chunks: List[np.ndarray] = []
    semantic: List[np.ndarray] = []
    instance: List[np.ndarray] = []
    sizes: Dict[int, float] = {}
    for instance_id, (cls, center, extents, yaw, size) in enumerate(_place_instances(rng, config, scene_index), 1):
        distance = float(np.linalg.norm(center - SENSOR_POSITION))
        area = 2.0 * (extents[0] * extents[1] + extents[0] * extents[2] + extents[1] * extents[2])
        expected = config.surface_density * area * _density_factor(distance, config)
        count = max(int(rng.poisson(expected)), 1)
        local = _sample_box_surface(rng, extents, count)
        chunks.append(local @ _yaw_matrix(yaw).T + center)
        semantic.append(np.full(count, cls.class_id))
        instance.append(np.full(count, instance_id))
        sizes[instance_id] = size

    for stuff_points, class_id in ((_ground_points(rng, config), ROAD), (_wall_points(rng, config), BUILDING)):
        chunks.append(stuff_points)
        semantic.append(np.full(len(stuff_points), class_id))
        instance.append(np.zeros(len(stuff_points), dtype=np.int64))

    if config.clutter_points:
        lo, hi = config.distance_range
        rho = rng.uniform(lo, hi, size=config.clutter_points)
        azimuth = rng.uniform(-np.pi, np.pi, size=config.clutter_points)
        clutter = np.column_stack([rho * np.cos(azimuth), rho * np.sin(azimuth),
                                   rng.uniform(0.0, 3.0, size=config.clutter_points)])
        chunks.append(clutter)
        semantic.append(np.full(config.clutter_points, UNLABELED))
        instance.append(np.zeros(config.clutter_points, dtype=np.int64))

    points = _as_float32_grid(np.vstack(chunks))
    intensity = rng.random(len(points)).astype(np.float32).astype(np.float64)
    cloud = PointCloud(points=points, intensity=intensity)
    labels = SceneLabels(semantic=np.concatenate(semantic), instance=np.concatenate(instance))

    instances = compute_instance_centers(cloud, labels)
    things_index = np.flatnonzero(labels.instance > 0)
    things_points = points[things_index]
    true_centers = centers_per_point(labels.instance[things_index], instances)

    noise = np.zeros_like(things_points)
    for summary in instances:
        members = labels.instance[things_index] == summary.instance_id
        noise[members] = _strip_noise(rng, summary.center, sizes[summary.instance_id],
                                      summary.diagonal, int(members.sum()), config)
    regressed = true_centers + noise
    offsets = regressed - things_points
    features = point_features(things_points, offsets)

    logger.debug(
        f"Scene {scene_index}: {len(points)} points, {len(instances)} instances, "
        f"{len(things_index)} things points"
    )
    return SynthScene(
        scene_index=scene_index,
        cloud=cloud,
        labels=labels,
        things_index=things_index,
        offsets=offsets,
        regressed_centers=regressed,
        features=features,
        instances=instances,
    )


def _local_covariance_ratios(points: np.ndarray, indptr: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """(N, 2) eigenvalue ratios lambda2/lambda1 and lambda3/lambda1 of each neighbourhood"""
    counts = np.diff(indptr).astype(np.float64)
    neighbours = points[indices]
    outer = (neighbours[:, :, None] * neighbours[:, None, :]).reshape(-1, 9)
    sums = np.add.reduceat(neighbours, indptr[:-1], axis=0)
    second = np.add.reduceat(outer, indptr[:-1], axis=0)
    mean = sums / counts[:, None]
    cov = second.reshape(-1, 3, 3) / counts[:, None, None] - mean[:, :, None] * mean[:, None, :]
    eig = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)
    ratios = np.zeros((len(points), 2))
    valid = eig[:, 0] > 1e-12
    ratios[valid] = eig[valid, 1:] / eig[valid, :1]
    return ratios


def point_features(points: np.ndarray, offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Hand-crafted per-point features of a set of things points

    Columns: distance to the sensor, neighbour counts within 0.5 m and 2 m
    (self included), two local covariance eigenvalue ratios, height above the
    ground plane and offset magnitude.

    Args:
        points: (N, 3) things points
        offsets: (N, 3) regressed offsets, zeros when absent

    Returns:
        (N, 7) feature matrix
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if offsets is None:
        offsets = np.zeros_like(points)
    features = np.zeros((len(points), FEATURE_DIM))
    if len(points) == 0:
        return features

    features[:, 0] = np.linalg.norm(points - SENSOR_POSITION, axis=1)
    index = build_index(points, LOCAL_RADII[1])
    for column, radius in zip((1, 2), LOCAL_RADII):
        indptr, _ = index.neighborhoods(points, radius)
        features[:, column] = np.diff(indptr)
    indptr, indices = index.neighborhoods(points, LOCAL_RADII[1])
    features[:, 3:5] = _local_covariance_ratios(points, indptr, indices)
    features[:, 5] = points[:, 2] - GROUND_HEIGHT
    features[:, 6] = np.linalg.norm(offsets, axis=1)
    return features


def gen_features(scene: SynthScene) -> np.ndarray:
    """Feature matrix of the scene's things points"""
    return point_features(scene.things_points, scene.offsets)


def density_profile(scenes: Sequence[SynthScene], bin_width_m: float = 5.0,
                    voxel_size: float = PROFILE_VOXEL_SIZE) -> pd.DataFrame:
    """
    Mean number of regressed centers per occupied voxel, binned by instance distance

    Args:
        scenes: Generated scenes
        bin_width_m: Width of a distance bin in meters
        voxel_size: Edge of the voxel grid over regressed centers

    Returns:
        DataFrame with columns distance_bin_start, distance_bin_end, instances,
        occupied_voxels, centers, mean_centers_per_voxel (one row per occupied bin)
    """
    if not scenes:
        raise ValueError("Density profile needs at least one scene")
    if bin_width_m <= 0:
        raise ValueError(f"Bin width must be positive, got {bin_width_m}")

    rows = []
    for scene in scenes:
        ids = scene.things_instance_ids
        for summary in scene.instances:
            centers = scene.regressed_centers[ids == summary.instance_id]
            voxels = np.unique(np.floor(centers / voxel_size).astype(np.int64), axis=0)
            distance = float(np.linalg.norm(summary.center - SENSOR_POSITION))
            rows.append({
                'distance_bin': int(np.floor(distance / bin_width_m)),
                'centers': len(centers),
                'occupied_voxels': len(voxels),
            })

    df = pd.DataFrame(rows)
    profile = df.groupby('distance_bin', sort=True).agg(
        instances=('centers', 'size'),
        occupied_voxels=('occupied_voxels', 'sum'),
        centers=('centers', 'sum'),
    ).reset_index()
    profile['mean_centers_per_voxel'] = profile['centers'] / profile['occupied_voxels']
    profile.insert(0, 'distance_bin_start', profile['distance_bin'] * bin_width_m)
    profile.insert(1, 'distance_bin_end', (profile['distance_bin'] + 1) * bin_width_m)
    return profile.drop(columns='distance_bin')


def export_scene(dataset: SceneDataset, frame_id: str, scene: SynthScene):
    """Write a scene as a points/labels pair plus its offsets/features sidecar"""
    write_scene(dataset.points_path(frame_id), dataset.labels_path(frame_id), scene.cloud, scene.labels)
    write_sidecar(dataset.sidecar_path(frame_id), scene.sidecar(), len(scene.cloud))
