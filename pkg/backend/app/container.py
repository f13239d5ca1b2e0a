"""
LMS1 motion sequence container.

Layout (little-endian): magic b"LMS1", version u32, frame_count u32,
point_count u32, fps f32, then frame_count × point_count × 3 float32 values
in frame-major order.
"""
import logging
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel, field_validator

from app.errors import ContainerFormatError

logger = logging.getLogger(__name__)

MAGIC = b"LMS1"
VERSION = 1
HEADER = struct.Struct('<4sIIIf')


class MotionSequence(BaseModel):
    """K frames of M points (vertex positions or displacements)."""
    frames: np.ndarray
    fps: float

    class Config:
        arbitrary_types_allowed = True

    @field_validator('frames', mode='before')
    @classmethod
    def _as_frames(cls, value):
        value = np.asarray(value, dtype=np.float32)
        if value.ndim != 3 or value.shape[2] != 3:
            raise ValueError(f"frames must be K×M×3, got shape {value.shape}")
        return value

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def point_count(self) -> int:
        return int(self.frames.shape[1])


def encode_container(sequence: MotionSequence) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, sequence.frame_count, sequence.point_count, sequence.fps)
    payload = np.ascontiguousarray(sequence.frames, dtype='<f4').tobytes()
    return header + payload


def decode_container(data: bytes) -> MotionSequence:
    """
    Parse container bytes.

    Raises:
        ContainerFormatError: On bad magic, unknown version or a truncated payload
    """
    if len(data) < HEADER.size:
        raise ContainerFormatError(f"container is {len(data)} bytes, shorter than its {HEADER.size}-byte header")
    magic, version, frame_count, point_count, fps = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    expected = frame_count * point_count * 3 * 4
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise ContainerFormatError(
            f"payload is {len(payload)} bytes, header declares {frame_count}×{point_count} points ({expected} bytes)"
        )
    frames = np.frombuffer(payload, dtype='<f4').reshape(frame_count, point_count, 3).astype(np.float32)
    return MotionSequence(frames=frames, fps=fps)


def write_container(sequence: MotionSequence, file_path: Union[str, Path]) -> Path:
    """Write a container atomically (temp file, then rename)."""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = file_path.with_name(file_path.name + ".tmp")
    tmp_path.write_bytes(encode_container(sequence))
    os.replace(tmp_path, file_path)
    logger.debug(f"Wrote {sequence.frame_count} frames × {sequence.point_count} points to {file_path}")
    return file_path


def read_container(file_path: Union[str, Path]) -> MotionSequence:
    file_path = Path(file_path)
    if not file_path.exists():
        raise ValueError(f"Container file not found: {file_path}")
    return decode_container(file_path.read_bytes())
