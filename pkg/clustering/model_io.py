"""
Binary model files for trained heads

Layout (little-endian): magic b'DSWH', u16 version, u8 head kind, u8 reserved,
u32 layer count followed by u32 layer widths, f64 input mean and scale,
f64 weights then bias of each layer, u32 candidate count and f64 candidates,
u32 iteration count, f64 step scale, f64 loss weights, and for direct heads
a trailing f64 delta_min.
"""
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from clustering.dynamic_shifting import BandwidthBank, Head, IterationSchedule
from clustering.weight_head import DirectRegressionHead, WeightHead
from data.scene_loader import write_bytes_atomic
from errors import ModelFormatError, SceneIOError

logger = logging.getLogger(__name__)

MAGIC = b'DSWH'
VERSION = 1
HEADER = struct.Struct('<4sHBB')
F64 = np.dtype('<f8')

HEAD_CLASSES = {WeightHead.KIND: WeightHead, DirectRegressionHead.KIND: DirectRegressionHead}


def serialize_head(head: Head, bank: BandwidthBank, schedule: IterationSchedule) -> bytes:
    """Encode a head with its bandwidth bank and schedule"""
    parts = [HEADER.pack(MAGIC, VERSION, head.KIND, 0),
             struct.pack('<I', len(head.layer_sizes)),
             struct.pack(f'<{len(head.layer_sizes)}I', *head.layer_sizes),
             np.asarray(head.input_mean, dtype=F64).tobytes(),
             np.asarray(head.input_scale, dtype=F64).tobytes()]
    for weight, bias in zip(head.weights, head.biases):
        parts.append(np.ascontiguousarray(weight, dtype=F64).tobytes())
        parts.append(np.ascontiguousarray(bias, dtype=F64).tobytes())
    parts.append(struct.pack('<I', len(bank)))
    parts.append(bank.as_array().astype(F64).tobytes())
    parts.append(struct.pack('<Id', schedule.iterations, schedule.step_scale))
    parts.append(np.asarray(schedule.loss_weights, dtype=F64).tobytes())
    if isinstance(head, DirectRegressionHead):
        parts.append(struct.pack('<d', head.delta_min))
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ModelFormatError(f"{self.source}: truncated model file")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * F64.itemsize), dtype=F64).astype(np.float64)


def deserialize_head(data: bytes, source: str = '<bytes>') -> Tuple[Head, BandwidthBank, IterationSchedule]:
    """Decode bytes produced by serialize_head"""
    reader = _Reader(data, source)
    magic, version, kind, _ = reader.unpack(HEADER.format)
    if magic != MAGIC:
        raise ModelFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"{source}: unsupported model version {version}")
    if kind not in HEAD_CLASSES:
        raise ModelFormatError(f"{source}: unknown head kind {kind}")

    (num_layers,) = reader.unpack('<I')
    if num_layers < 2:
        raise ModelFormatError(f"{source}: model declares {num_layers} layer widths")
    layer_sizes = list(reader.unpack(f'<{num_layers}I'))
    input_mean = reader.floats(layer_sizes[0])
    input_scale = reader.floats(layer_sizes[0])
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        params[f"W{i}"] = reader.floats(fan_in * fan_out).reshape(fan_in, fan_out)
        params[f"b{i}"] = reader.floats(fan_out)

    (num_candidates,) = reader.unpack('<I')
    candidates = reader.floats(num_candidates)
    iterations, step_scale = reader.unpack('<Id')
    loss_weights = reader.floats(iterations)

    try:
        bank = BandwidthBank(tuple(candidates.tolist()))
        schedule = IterationSchedule(iterations, step_scale, tuple(loss_weights.tolist()))
        if kind == DirectRegressionHead.KIND:
            (delta_min,) = reader.unpack('<d')
            head = DirectRegressionHead(layer_sizes, zero_init=True, delta_min=delta_min)
        else:
            head = WeightHead(layer_sizes, zero_init=True)
    except ValueError as e:
        raise ModelFormatError(f"{source}: invalid model contents: {e}")
    if reader.offset != len(data):
        raise ModelFormatError(f"{source}: {len(data) - reader.offset} trailing bytes")
    if isinstance(head, WeightHead) and head.num_candidates != len(bank):
        raise ModelFormatError(f"{source}: head width {head.num_candidates} != {len(bank)} candidates")

    head.set_parameters(params)
    head.input_mean = input_mean
    head.input_scale = input_scale
    return head, bank, schedule


def save_head(path: Union[str, Path], head: Head, bank: BandwidthBank, schedule: IterationSchedule):
    """Write a model file; a failed write leaves any previous file in place"""
    path = Path(path)
    write_bytes_atomic(path, serialize_head(head, bank, schedule))
    logger.info(f"Saved {type(head).__name__} with {head.num_parameters} parameters to {path}")


def load_head(path: Union[str, Path]) -> Tuple[Head, BandwidthBank, IterationSchedule]:
    """Read a model file written by save_head"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SceneIOError(path, f"cannot read model: {e.strerror or e}")
    return deserialize_head(data, str(path))
