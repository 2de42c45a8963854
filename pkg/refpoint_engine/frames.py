"""
Sensor-stream domain model.

A FrameStream stores one referencing event as column arrays (one row per
frame, NaN where a modality was not tracked). ModalityFrame is the per-line
record used by the JSON Lines event files.

Euler convention: intrinsic yaw-pitch-roll about ISO 8855 z-y-x, i.e.
R = Rz(yaw) @ Ry(pitch) @ Rx(roll); the forward axis is R @ [1, 0, 0].
"""
import logging
import math
from enum import IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import EmptyModalityError, InsufficientCoverageError
from .geo import CarVector, RigidTransform

logger = logging.getLogger(__name__)

NOMINAL_RATE_HZ = 45.0
WINDOW_FRAMES = 36
WINDOW_BEFORE = 18
UNIT_TOL = 1e-6

MODALITY_ORDER = ("finger", "eye", "head")
MODALITY_FIELDS = {
    "finger": ("finger_pos", "finger_dir"),
    "eye": ("eye_pos", "eye_dir"),
    "head": ("head_pos", "head_euler"),
}
DIRECTION_FIELDS = ("finger_dir", "eye_dir")
ALL_FIELDS = tuple(f for m in MODALITY_ORDER for f in MODALITY_FIELDS[m])
# feature axis layout of a SampleTensor
FEATURE_ORDER = ("finger_pos", "finger_dir", "eye_pos", "eye_dir", "head_pos", "head_dir")


class FrameState(IntEnum):
    MISSING = 0
    VALID = 1
    INTERPOLATED = 2


Vec3 = Optional[Tuple[float, float, float]]


# ---------------------------------------------------------------------------
# orientation helpers
# ---------------------------------------------------------------------------

def euler_to_matrix(euler) -> np.ndarray:
    """(roll, pitch, yaw) -> 3x3 rotation; works on (3,) or (N, 3)."""
    e = np.asarray(euler, dtype=np.float64)
    roll, pitch, yaw = e[..., 0], e[..., 1], e[..., 2]
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    r = np.empty(e.shape[:-1] + (3, 3))
    r[..., 0, 0] = cy * cp
    r[..., 0, 1] = cy * sp * sr - sy * cr
    r[..., 0, 2] = cy * sp * cr + sy * sr
    r[..., 1, 0] = sy * cp
    r[..., 1, 1] = sy * sp * sr + cy * cr
    r[..., 1, 2] = sy * sp * cr - cy * sr
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * sr
    r[..., 2, 2] = cp * cr
    return r


def matrix_to_euler(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    pitch = np.arcsin(np.clip(-r[..., 2, 0], -1.0, 1.0))
    roll = np.arctan2(r[..., 2, 1], r[..., 2, 2])
    yaw = np.arctan2(r[..., 1, 0], r[..., 0, 0])
    return np.stack([roll, pitch, yaw], axis=-1)


def euler_to_direction(head_euler) -> np.ndarray:
    """Forward axis after yaw about z then pitch about y; roll leaves it alone."""
    e = np.asarray(head_euler, dtype=np.float64)
    pitch, yaw = e[..., 1], e[..., 2]
    return np.stack([np.cos(pitch) * np.cos(yaw),
                     np.cos(pitch) * np.sin(yaw),
                     -np.sin(pitch)], axis=-1)


def direction_to_yaw_pitch(direction) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of euler_to_direction for the forward axis."""
    v = np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1)
    yaw = np.arctan2(v[..., 1], v[..., 0])
    pitch = -np.arcsin(np.clip(v[..., 2] / n, -1.0, 1.0))
    return yaw, pitch


def yaw_pitch_to_direction(yaw, pitch) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    return euler_to_direction(np.stack([np.zeros_like(yaw), pitch, yaw], axis=-1))


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

class ModalityFrame(BaseModel):
    """One timestamped reading; a modality is None when it was not tracked."""
    model_config = ConfigDict(frozen=True)

    timestamp: float
    finger_pos: Vec3 = None
    finger_dir: Vec3 = None
    eye_pos: Vec3 = None
    eye_dir: Vec3 = None
    head_pos: Vec3 = None
    head_euler: Vec3 = None
    states: Dict[str, FrameState] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _consistent(self):
        for modality, fields in MODALITY_FIELDS.items():
            present = [getattr(self, f) is not None for f in fields]
            if any(present) and not all(present):
                raise ValueError(f"{modality} fields must be all present or all null")
            state = self.states.get(modality)
            if state is None:
                self.states[modality] = FrameState.VALID if all(present) else FrameState.MISSING
            elif state != FrameState.MISSING and not all(present):
                raise ValueError(f"{modality} flagged {state.name} but has no values")
        for field in DIRECTION_FIELDS:
            v = getattr(self, field)
            if v is not None and abs(math.sqrt(sum(c * c for c in v)) - 1.0) > UNIT_TOL:
                raise ValueError(f"{field} is not unit length")
        return self

    def is_valid(self, modality: str) -> bool:
        return self.states[modality] != FrameState.MISSING


class SensorExtrinsics(BaseModel):
    """Sensor -> car transforms: GCS tracks the finger, VCS the eyes and head."""
    model_config = ConfigDict(frozen=True)

    gcs: RigidTransform
    vcs: RigidTransform

    @classmethod
    def identity(cls) -> "SensorExtrinsics":
        return cls(gcs=RigidTransform.identity(), vcs=RigidTransform.identity())

    def for_modality(self, modality: str) -> RigidTransform:
        return self.gcs if modality == "finger" else self.vcs

    def to_dict(self):
        return {"gcs": self.gcs.to_dict(), "vcs": self.vcs.to_dict()}

    @classmethod
    def from_dict(cls, data) -> "SensorExtrinsics":
        return cls(gcs=RigidTransform.from_dict(data["gcs"]), vcs=RigidTransform.from_dict(data["vcs"]))


class FrameStream(BaseModel):
    """Column-stored event stream; arrays are read-only, ops return new streams."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    timestamps: np.ndarray
    finger_pos: np.ndarray
    finger_dir: np.ndarray
    eye_pos: np.ndarray
    eye_dir: np.ndarray
    head_pos: np.ndarray
    head_euler: np.ndarray
    states: np.ndarray  # (T, 3) FrameState codes, columns in MODALITY_ORDER
    rate: float = NOMINAL_RATE_HZ

    @field_validator("timestamps", *ALL_FIELDS, mode="before")
    @classmethod
    def _float_copy(cls, value):
        return np.array(value, dtype=np.float64)

    @field_validator("states", mode="before")
    @classmethod
    def _state_copy(cls, value):
        return np.array(value, dtype=np.int8)

    @model_validator(mode="after")
    def _check(self):
        ts = self.timestamps
        if ts.ndim != 1 or len(ts) == 0:
            raise ValueError("stream needs at least one frame")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not self.rate > 0:
            raise ValueError("nominal rate must be positive")
        for name in ALL_FIELDS:
            if getattr(self, name).shape != (len(ts), 3):
                raise ValueError(f"{name} must have shape ({len(ts)}, 3)")
        if self.states.shape != (len(ts), len(MODALITY_ORDER)):
            raise ValueError("states must have one column per modality")
        for name in ALL_FIELDS + ("timestamps", "states"):
            getattr(self, name).setflags(write=False)
        return self

    def __len__(self):
        return len(self.timestamps)

    def valid_mask(self, modality: str) -> np.ndarray:
        return self.states[:, MODALITY_ORDER.index(modality)] != FrameState.MISSING

    def replace(self, **arrays) -> "FrameStream":
        data = {name: getattr(self, name).copy() for name in ALL_FIELDS + ("timestamps", "states")}
        data.update(arrays)
        return FrameStream(rate=self.rate, **data)

    @classmethod
    def from_frames(cls, frames: List[ModalityFrame], rate: float = NOMINAL_RATE_HZ) -> "FrameStream":
        n = len(frames)
        arrays = {name: np.full((n, 3), np.nan) for name in ALL_FIELDS}
        states = np.zeros((n, len(MODALITY_ORDER)), dtype=np.int8)
        for i, frame in enumerate(frames):
            for j, modality in enumerate(MODALITY_ORDER):
                states[i, j] = int(frame.states[modality])
                for name in MODALITY_FIELDS[modality]:
                    value = getattr(frame, name)
                    if value is not None:
                        arrays[name][i] = value
        timestamps = np.array([f.timestamp for f in frames], dtype=np.float64)
        return cls(timestamps=timestamps, states=states, rate=rate, **arrays)

    def frames(self) -> List[ModalityFrame]:
        out = []
        for i in range(len(self)):
            kwargs = {"timestamp": float(self.timestamps[i]), "states": {}}
            for j, modality in enumerate(MODALITY_ORDER):
                state = FrameState(int(self.states[i, j]))
                kwargs["states"][modality] = state
                if state != FrameState.MISSING:
                    for name in MODALITY_FIELDS[modality]:
                        kwargs[name] = tuple(float(c) for c in getattr(self, name)[i])
            out.append(ModalityFrame(**kwargs))
        return out


class SampleMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    user_id: str
    pose_id: int
    roi_id: int
    ref_type: str
    event_id: str = ""
    poi_index: Optional[int] = None
    left_hand: bool = False


class SampleTensor(BaseModel):
    """Network input (t, f, d) with its ground-truth label."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray
    label: Optional[CarVector] = None
    meta: Optional[SampleMeta] = None

    @field_validator("values", mode="before")
    @classmethod
    def _shape(cls, value):
        v = np.asarray(value, dtype=np.float64)
        if v.shape != (WINDOW_FRAMES, len(FEATURE_ORDER), 3):
            raise ValueError(f"sample tensor must be (36, 6, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("sample tensor contains missing values")
        return v

    @field_validator("label")
    @classmethod
    def _unit_label(cls, value):
        if value is not None and not value.normalized:
            raise ValueError("label must be a normalized CarVector")
        return value


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def transform_frame(frame: ModalityFrame, ext: SensorExtrinsics) -> ModalityFrame:
    """Sensor coordinates -> car coordinates for one frame."""
    update = {}
    for modality, (pos_name, orient_name) in MODALITY_FIELDS.items():
        if not frame.is_valid(modality):
            continue
        t = ext.for_modality(modality)
        update[pos_name] = tuple(float(c) for c in t.apply(getattr(frame, pos_name)))
        orient = getattr(frame, orient_name)
        if orient_name == "head_euler":
            new = matrix_to_euler(t.rotation @ euler_to_matrix(orient))
        else:
            new = t.apply_rotation(orient)
        update[orient_name] = tuple(float(c) for c in new)
    return ModalityFrame(**{**frame.model_dump(), **update})


def transform_stream(stream: FrameStream, ext: SensorExtrinsics) -> FrameStream:
    """Vectorised transform_frame over a whole stream (NaN rows stay NaN)."""
    out = {}
    for modality, (pos_name, orient_name) in MODALITY_FIELDS.items():
        t = ext.for_modality(modality)
        out[pos_name] = t.apply(getattr(stream, pos_name))
        orient = getattr(stream, orient_name)
        if orient_name == "head_euler":
            mats = np.einsum("ij,njk->nik", t.rotation, euler_to_matrix(orient))
            out[orient_name] = matrix_to_euler(mats)
        else:
            out[orient_name] = t.apply_rotation(orient)
    return stream.replace(**out)


def _interp_columns(ts: np.ndarray, known: np.ndarray, values: np.ndarray) -> np.ndarray:
    # np.interp holds the end values, which is the boundary policy we want
    return np.stack([np.interp(ts, ts[known], values[known, k]) for k in range(values.shape[1])], axis=1)


def interpolate_gaps(stream: FrameStream) -> FrameStream:
    """
    Fill missing modality frames by linear interpolation in time.

    Gaps at either end hold the nearest tracked value. Interpolated direction
    vectors are re-normalised; head yaw is unwrapped before interpolating.
    Frames that were already tracked are left untouched.
    """
    ts = stream.timestamps
    out = {}
    states = stream.states.copy()
    for j, modality in enumerate(MODALITY_ORDER):
        known = states[:, j] != FrameState.MISSING
        if not known.any():
            raise EmptyModalityError(f"modality '{modality}' has no tracked frame in the stream")
        if known.all():
            continue
        missing = ~known
        for name in MODALITY_FIELDS[modality]:
            values = getattr(stream, name).copy()
            source = values.copy()
            if name == "head_euler":
                source[known] = np.unwrap(source[known], axis=0)
            filled = _interp_columns(ts, known, source)
            if name == "head_euler":
                filled = wrap_angle(filled)
            if name in DIRECTION_FIELDS:
                filled[missing] /= np.linalg.norm(filled[missing], axis=1, keepdims=True)
            values[missing] = filled[missing]
            out[name] = values
        states[missing, j] = FrameState.INTERPOLATED
    if not out:
        return stream
    return stream.replace(states=states, **out)


def window_indices(timestamps: np.ndarray, trigger_ts: float, rate: float,
                   n_frames: int = WINDOW_FRAMES, n_before: int = WINDOW_BEFORE) -> np.ndarray:
    """Nearest frame to each ideal time trigger + (i - n_before) / rate."""
    period = 1.0 / rate
    ideal = trigger_ts + (np.arange(n_frames) - n_before) * period
    if ideal[0] < timestamps[0] - period / 2 or ideal[-1] > timestamps[-1] + period / 2:
        raise InsufficientCoverageError(
            f"window [{ideal[0]:.3f}, {ideal[-1]:.3f}] s exceeds stream "
            f"[{timestamps[0]:.3f}, {timestamps[-1]:.3f}] s")
    right = np.clip(np.searchsorted(timestamps, ideal), 1, len(timestamps) - 1)
    left = right - 1
    pick_left = np.abs(ideal - timestamps[left]) <= np.abs(timestamps[right] - ideal)
    idx = np.where(pick_left, left, right)
    if np.any(np.diff(idx) <= 0):
        # jitter larger than half a period can map two ideal times onto one frame
        start = int(idx[0])
        if start + n_frames > len(timestamps):
            raise InsufficientCoverageError("not enough frames after the trigger")
        idx = np.arange(start, start + n_frames)
    return idx


def extract_window(stream: FrameStream, trigger_ts: float) -> SampleTensor:
    """Cut the 36-frame window around the trigger and lay it out as (t, f, d)."""
    idx = window_indices(stream.timestamps, trigger_ts, stream.rate)
    head_dir = euler_to_direction(stream.head_euler[idx])
    columns = {
        "finger_pos": stream.finger_pos[idx], "finger_dir": stream.finger_dir[idx],
        "eye_pos": stream.eye_pos[idx], "eye_dir": stream.eye_dir[idx],
        "head_pos": stream.head_pos[idx], "head_dir": head_dir,
    }
    values = np.stack([columns[name] for name in FEATURE_ORDER], axis=1)
    if not np.all(np.isfinite(values)):
        raise EmptyModalityError("window still has untracked frames; interpolate gaps first")
    return SampleTensor(values=values)
