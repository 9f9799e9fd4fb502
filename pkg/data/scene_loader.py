"""
Scene loader for SemanticKITTI-format point and label files
"""
import contextlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from common import PointCloud, SceneLabels, SemanticScheme
from data.semantic_scheme import remap_classes
from errors import SceneIOError, SizeMismatchError

logger = logging.getLogger(__name__)

POINT_DTYPE = np.dtype('<f4')
LABEL_DTYPE = np.dtype('<u4')
POINT_FIELDS = 4  # x, y, z, intensity

SIDECAR_MAGIC = b'DSSC'
SIDECAR_VERSION = 1
SIDECAR_HEADER = struct.Struct('<4sHHIII')

PathLike = Union[str, Path]


def decode_label(raw):
    """
    Split raw SemanticKITTI labels into semantic and instance ids

    Args:
        raw: 32-bit label value or array of values

    Returns:
        Tuple of (semantic, instance): low and high 16 bits
    """
    raw = np.asarray(raw, dtype=np.int64)
    semantic = (raw & 0xFFFF).astype(np.int64)
    instance = (raw >> 16).astype(np.int64)
    if semantic.ndim == 0:
        return int(semantic), int(instance)
    return semantic, instance


def encode_label(semantic, instance):
    """
    Pack semantic and instance ids into 32-bit SemanticKITTI labels

    Args:
        semantic: Semantic id(s), 0..65535
        instance: Instance id(s), 0..65535

    Returns:
        uint32 label value or array
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if np.any((semantic < 0) | (semantic > 0xFFFF)) or np.any((instance < 0) | (instance > 0xFFFF)):
        raise ValueError("Semantic and instance ids must fit in 16 bits")
    raw = (semantic | (instance << 16)).astype(LABEL_DTYPE)
    if raw.ndim == 0:
        return int(raw)
    return raw


def _read_array(path: Path, dtype: np.dtype) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SceneIOError(path, f"cannot read file: {e.strerror or e}")
    if len(data) % dtype.itemsize:
        raise SizeMismatchError(f"{path}: size {len(data)} is not a multiple of {dtype.itemsize} bytes")
    return np.frombuffer(data, dtype=dtype)


def write_bytes_atomic(path: Path, payload: bytes):
    """Write a file atomically through a temporary sibling"""
    staging = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        staging.write_bytes(payload)
        os.replace(staging, path)
    except OSError as e:
        with contextlib.suppress(OSError):
            staging.unlink()
        raise SceneIOError(path, f"cannot write file: {e.strerror or e}")


def read_points(points_path: PathLike) -> PointCloud:
    """
    Load a binary point file (float32 x, y, z, intensity per point)

    Args:
        points_path: Path to the .bin file

    Returns:
        PointCloud with float64 coordinates
    """
    path = Path(points_path)
    flat = _read_array(path, POINT_DTYPE)
    if len(flat) % POINT_FIELDS:
        raise SizeMismatchError(f"{path}: {len(flat)} floats is not a multiple of {POINT_FIELDS}")
    records = flat.reshape(-1, POINT_FIELDS).astype(np.float64)
    return PointCloud(points=records[:, :3], intensity=records[:, 3])


def read_labels(labels_path: PathLike, scheme: Optional[SemanticScheme] = None) -> SceneLabels:
    """
    Load a binary label file (uint32 per point)

    Args:
        labels_path: Path to the .label file
        scheme: Optional scheme whose remap table is applied to the semantic ids

    Returns:
        SceneLabels
    """
    raw = _read_array(Path(labels_path), LABEL_DTYPE)
    semantic, instance = decode_label(raw)
    semantic = np.atleast_1d(semantic)
    instance = np.atleast_1d(instance)
    if scheme is not None:
        semantic = remap_classes(semantic, scheme)
    return SceneLabels(semantic=semantic, instance=instance)


def read_scene(points_path: PathLike, labels_path: PathLike,
               scheme: Optional[SemanticScheme] = None) -> Tuple[PointCloud, SceneLabels]:
    """
    Load a point file and its label file

    Args:
        points_path: Path to the .bin file
        labels_path: Path to the .label file
        scheme: Semantic scheme used to remap raw class ids

    Returns:
        Tuple of (PointCloud, SceneLabels) with the same point count
    """
    cloud = read_points(points_path)
    labels = read_labels(labels_path, scheme)
    if len(cloud) != len(labels):
        raise SizeMismatchError(
            f"{labels_path}: {len(labels)} labels for {len(cloud)} points in {points_path}"
        )
    logger.debug(f"Read {len(cloud)} points from {points_path}")
    return cloud, labels


def write_points(points_path: PathLike, cloud: PointCloud):
    """Write a PointCloud as float32 x, y, z, intensity records"""
    records = np.column_stack([cloud.points, cloud.intensity]).astype(POINT_DTYPE)
    write_bytes_atomic(Path(points_path), records.tobytes())


def write_labels(labels_path: PathLike, labels: SceneLabels):
    """Write labels in the SemanticKITTI uint32 encoding"""
    raw = np.atleast_1d(encode_label(labels.semantic, labels.instance)).astype(LABEL_DTYPE)
    write_bytes_atomic(Path(labels_path), raw.tobytes())


def write_scene(points_path: PathLike, labels_path: PathLike, cloud: PointCloud, labels: SceneLabels):
    """Write a point file and its label file"""
    if len(cloud) != len(labels):
        raise SizeMismatchError(f"{len(labels)} labels for {len(cloud)} points")
    write_points(points_path, cloud)
    write_labels(labels_path, labels)


@dataclass(frozen=True)
class SceneSidecar:
    """Regressed offsets and features of the things points of one frame"""
    things_index: np.ndarray
    offsets: np.ndarray
    features: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def write_sidecar(path: PathLike, sidecar: SceneSidecar, num_points: int):
    """
    Write offsets and features with a self-describing header

    Layout: magic, version, reserved, point count, things count, feature width,
    then uint32 things indices, float32 offsets (N x 3) and float32 features (N x D).
    """
    things_index = np.asarray(sidecar.things_index, dtype='<u4')
    offsets = np.asarray(sidecar.offsets, dtype=POINT_DTYPE).reshape(-1, 3)
    features = np.asarray(sidecar.features, dtype=POINT_DTYPE)
    if len(offsets) != len(things_index) or len(features) != len(things_index):
        raise SizeMismatchError("Sidecar offsets/features must align with the things index")
    header = SIDECAR_HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, 0, num_points,
                                 len(things_index), features.shape[1] if features.ndim == 2 else 0)
    write_bytes_atomic(Path(path), header + things_index.tobytes() + offsets.tobytes() + features.tobytes())


def read_sidecar(path: PathLike) -> Tuple[SceneSidecar, int]:
    """
    Read a sidecar file

    Args:
        path: Path to the sidecar file

    Returns:
        Tuple of (SceneSidecar, point count recorded in the header)
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SceneIOError(path, f"cannot read sidecar: {e.strerror or e}")
    if len(data) < SIDECAR_HEADER.size:
        raise SizeMismatchError(f"{path}: truncated sidecar header")
    magic, version, _, num_points, count, dim = SIDECAR_HEADER.unpack_from(data)
    if magic != SIDECAR_MAGIC or version != SIDECAR_VERSION:
        raise SceneIOError(path, f"not a sidecar file (magic {magic!r}, version {version})")
    expected = SIDECAR_HEADER.size + count * 4 + count * 3 * 4 + count * dim * 4
    if len(data) != expected:
        raise SizeMismatchError(f"{path}: expected {expected} bytes, found {len(data)}")

    offset = SIDECAR_HEADER.size
    things_index = np.frombuffer(data, dtype='<u4', count=count, offset=offset).astype(np.int64)
    offset += count * 4
    offsets = np.frombuffer(data, dtype=POINT_DTYPE, count=count * 3, offset=offset)
    offset += count * 3 * 4
    features = np.frombuffer(data, dtype=POINT_DTYPE, count=count * dim, offset=offset)
    sidecar = SceneSidecar(
        things_index=things_index,
        offsets=offsets.reshape(count, 3).astype(np.float64),
        features=features.reshape(count, dim).astype(np.float64),
    )
    return sidecar, num_points


@dataclass
class SceneFrame:
    """One frame of a dataset directory"""
    frame_id: str
    cloud: PointCloud
    labels: Optional[SceneLabels]
    sidecar: Optional[SceneSidecar] = None


class SceneDataset:
    """
    Directory of frames in the SemanticKITTI layout

    velodyne/<frame>.bin, labels/<frame>.label, and optionally
    sidecar/<frame>.dss with regressed offsets and features.
    """

    POINTS_DIR = 'velodyne'
    LABELS_DIR = 'labels'
    SIDECAR_DIR = 'sidecar'
    PREDICTIONS_DIR = 'predictions'
    MANIFEST = 'manifest.json'

    def __init__(self, root: PathLike, scheme: Optional[SemanticScheme] = None):
        self.root = Path(root)
        self.scheme = scheme
        self.logger = logging.getLogger(__name__)

    def points_path(self, frame_id: str) -> Path:
        return self.root / self.POINTS_DIR / f"{frame_id}.bin"

    def labels_path(self, frame_id: str) -> Path:
        return self.root / self.LABELS_DIR / f"{frame_id}.label"

    def sidecar_path(self, frame_id: str) -> Path:
        return self.root / self.SIDECAR_DIR / f"{frame_id}.dss"

    def frame_ids(self) -> List[str]:
        """Sorted frame ids found under velodyne/ (or labels/ for label-only sets)"""
        points_dir = self.root / self.POINTS_DIR
        if points_dir.is_dir():
            return sorted(p.stem for p in points_dir.glob('*.bin'))
        labels_dir = self.root / self.LABELS_DIR
        if labels_dir.is_dir():
            return sorted(p.stem for p in labels_dir.glob('*.label'))
        raise SceneIOError(self.root, "no velodyne/ or labels/ directory")

    def load_labels(self, frame_id: str) -> SceneLabels:
        return read_labels(self.labels_path(frame_id), self.scheme)

    def load_frame(self, frame_id: str, with_labels: bool = True) -> SceneFrame:
        """
        Load one frame with its labels and sidecar when present

        Args:
            frame_id: Frame stem, e.g. '000042'
            with_labels: Whether the labels file is required

        Returns:
            SceneFrame
        """
        cloud = read_points(self.points_path(frame_id))
        labels = None
        if with_labels:
            labels = self.load_labels(frame_id)
            if len(labels) != len(cloud):
                raise SizeMismatchError(
                    f"{self.labels_path(frame_id)}: {len(labels)} labels for {len(cloud)} points"
                )
        sidecar = None
        if self.sidecar_path(frame_id).exists():
            sidecar, num_points = read_sidecar(self.sidecar_path(frame_id))
            if num_points != len(cloud):
                raise SizeMismatchError(
                    f"{self.sidecar_path(frame_id)}: header says {num_points} points, cloud has {len(cloud)}"
                )
        return SceneFrame(frame_id=frame_id, cloud=cloud, labels=labels, sidecar=sidecar)

    def read_manifest(self) -> Dict:
        path = self.root / self.MANIFEST
        try:
            with open(path, 'r') as f:
                return json.load(f)
        except (IOError, json.JSONDecodeError) as e:
            self.logger.error(f"Error loading manifest {path}: {e}")
            raise SceneIOError(path, f"cannot read manifest: {e}")
