"""Observation layout, normalization, body-frame features and dataset I/O.

A frame is a 48-dimensional vector built from two 18-sensor gloves plus the
position and orientation of each wrist receiver.  It is partitioned into six
synchronous streams; every other module indexes frames through
:data:`LAYOUT`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

FRAME_DIM = 48
N_STREAMS = 6


class DataError(ValueError):
    """Malformed frame, layout or dataset record."""


@dataclass(frozen=True)
class StreamSpec:
    id: int
    name: str
    dim: int
    offset: int

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.dim)


@dataclass(frozen=True)
class StreamLayout:
    streams: tuple[StreamSpec, ...]

    def __post_init__(self):
        if len(self.streams) != N_STREAMS:
            raise DataError(f"expected {N_STREAMS} streams, got {len(self.streams)}")
        pos = 0
        for k, s in enumerate(self.streams):
            if s.id != k + 1 or s.offset != pos or s.dim <= 0:
                raise DataError(f"stream {s.name!r} is not contiguous at offset {pos}")
            pos += s.dim
        if pos != FRAME_DIM:
            raise DataError(f"stream dims sum to {pos}, expected {FRAME_DIM}")

    @classmethod
    def from_dims(cls, names: Sequence[str], dims: Sequence[int]) -> "StreamLayout":
        offs = np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(int)
        return cls(tuple(StreamSpec(i + 1, n, int(d), int(o))
                         for i, (n, d, o) in enumerate(zip(names, dims, offs))))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.dim for s in self.streams)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.streams)

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(s.slice for s in self.streams)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "StreamLayout":
        return cls.from_dims(d["names"], d["dims"])


STREAM_NAMES = (
    "right-shape",
    "left-shape",
    "right-position",
    "left-position",
    "right-orientation",
    "left-orientation",
)
LAYOUT = StreamLayout.from_dims(STREAM_NAMES, (18, 18, 3, 3, 3, 3))


def split_streams(frame, layout: StreamLayout = LAYOUT) -> list[np.ndarray]:
    """Split a frame (or a ``(T, 48)`` block of frames) into its six streams.

    The returned arrays are views; concatenating them along the last axis
    reproduces the input exactly.
    """
    x = np.asarray(frame, dtype=np.float64)
    if x.shape[-1] != FRAME_DIM:
        raise DataError(f"frame has {x.shape[-1]} components, expected {FRAME_DIM}")
    return [x[..., sl] for sl in layout.slices]


def concat_streams(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=-1)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-component min/max gathered on training data."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        lo = np.array(self.minimum, dtype=np.float64)
        hi = np.array(self.maximum, dtype=np.float64)
        if lo.shape != (FRAME_DIM,) or hi.shape != (FRAME_DIM,):
            raise DataError("normalization stats must have 48 components")
        if np.any(hi < lo):
            raise DataError("normalization max below min")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def degenerate(self) -> np.ndarray:
        return self.maximum == self.minimum

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls(np.zeros(FRAME_DIM), np.ones(FRAME_DIM))

    @classmethod
    def fit(cls, raw_frames) -> "NormalizationStats":
        x = np.asarray(raw_frames, dtype=np.float64).reshape(-1, FRAME_DIM)
        if len(x) == 0:
            raise DataError("cannot compute normalization stats from no frames")
        return cls(x.min(axis=0), x.max(axis=0))

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["min"]), np.array(d["max"]))


def normalize_frame(raw, stats: NormalizationStats) -> np.ndarray:
    """Min-max scale raw values into [0, 1], clamping out-of-range input.

    Works on a single frame or a ``(T, 48)`` block.  Components whose
    training range is degenerate map to 0.5.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.shape[-1] != FRAME_DIM:
        raise DataError(f"frame has {x.shape[-1]} components, expected {FRAME_DIM}")
    span = stats.maximum - stats.minimum
    degen = span == 0
    safe = np.where(degen, 1.0, span)
    out = np.clip((x - stats.minimum) / safe, 0.0, 1.0)
    return np.where(degen, 0.5, out)


# -- body-frame transform -----------------------------------------------------

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class ReceiverPose:
    """Receiver position and rotation, both expressed in the transmitter frame."""

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise DataError("rotation matrix is not orthonormal")
        if np.linalg.det(r) < 0:
            raise DataError("rotation matrix is a reflection")
        p.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "rotation", r)


def euler_zyx(r: np.ndarray) -> np.ndarray:
    """Z-Y-X (yaw, pitch, roll) angles of a rotation matrix."""
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    if abs(r[2, 0]) < 1.0 - 1e-12:
        yaw = math.atan2(r[1, 0], r[0, 0])
        roll = math.atan2(r[2, 1], r[2, 2])
    else:  # gimbal lock: fold roll into yaw
        yaw = math.atan2(-r[0, 1], r[1, 1])
        roll = 0.0
    return np.array([yaw, pitch, roll])


def rotation_from_euler_zyx(angles) -> np.ndarray:
    yaw, pitch, roll = angles
    cz, sz = math.cos(yaw), math.sin(yaw)
    cy, sy = math.cos(pitch), math.sin(pitch)
    cx, sx = math.cos(roll), math.sin(roll)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


def to_body_frame(hand: ReceiverPose, thorax: ReceiverPose) -> tuple[np.ndarray, np.ndarray]:
    """Express a wrist receiver pose relative to the thorax receiver.

    Returns the hand position in thorax coordinates and the Z-Y-X Euler
    angles of the relative rotation.
    """
    rt = thorax.rotation.T
    pos = rt @ (hand.position - thorax.position)
    return pos, euler_zyx(rt @ hand.rotation)


# -- sequences and dataset files ----------------------------------------------


@dataclass(frozen=True)
class GestureSequence:
    frames: np.ndarray
    label: str | tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.array(self.frames, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != FRAME_DIM:
            raise DataError(f"frames must have shape (T, {FRAME_DIM}), got {x.shape}")
        if len(x) == 0:
            raise DataError("gesture sequence is empty")
        x.flags.writeable = False
        object.__setattr__(self, "frames", x)
        if isinstance(self.label, list):
            object.__setattr__(self, "label", tuple(self.label))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def signs(self) -> tuple[str, ...]:
        """The label as a sign sequence (a bare string is a one-sign sentence)."""
        if self.label is None:
            return ()
        if isinstance(self.label, str):
            return (self.label,)
        return tuple(self.label)

    def to_record(self) -> dict:
        label = self.label if isinstance(self.label, str) or self.label is None else list(self.label)
        return {"label": label, "frames": self.frames.tolist()}


@dataclass
class Dataset:
    sequences: list[GestureSequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[GestureSequence]:
        return iter(self.sequences)

    def by_label(self) -> dict[str, list[GestureSequence]]:
        out: dict[str, list[GestureSequence]] = {}
        for s in self.sequences:
            key = s.label if isinstance(s.label, str) else " ".join(s.signs)
            out.setdefault(key, []).append(s)
        return out


def read_jsonl(path) -> Dataset:
    """Read the JSON-lines dataset format; errors carry line numbers."""
    seqs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                label = rec.get("label")
                if not (label is None or isinstance(label, str)
                        or (isinstance(label, list) and all(isinstance(x, str) for x in label))):
                    raise DataError("label must be a string or list of strings")
                seqs.append(GestureSequence(np.asarray(rec["frames"], dtype=np.float64), label))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return Dataset(seqs)


def write_jsonl(path, sequences: Iterable[GestureSequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in sequences:
            fh.write(json.dumps(s.to_record()) + "\n")
