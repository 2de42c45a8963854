import math

import numpy as np
import pytest

from .errors import EmptyModalityError, InsufficientCoverageError
from .frames import (
    FEATURE_ORDER,
    MODALITY_ORDER,
    FrameState,
    FrameStream,
    ModalityFrame,
    SampleTensor,
    SensorExtrinsics,
    direction_to_yaw_pitch,
    euler_to_direction,
    euler_to_matrix,
    extract_window,
    interpolate_gaps,
    matrix_to_euler,
    transform_frame,
    transform_stream,
    window_indices,
    yaw_pitch_to_direction,
)
from .geo import RigidTransform


def _linear_stream(n=100, rate=45.0, jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    ts = np.arange(n) / rate + rng.uniform(-jitter, jitter, n)
    # positions move linearly in time so interpolation is exact
    k = ts[:, None] * rate
    yaw = np.linspace(-0.3, 0.6, n)
    pitch = np.linspace(0.1, -0.2, n)
    dirs = yaw_pitch_to_direction(yaw, pitch)
    return FrameStream(
        timestamps=ts,
        finger_pos=np.array([0.1, 0.2, 0.3]) + 0.01 * k,
        finger_dir=dirs,
        eye_pos=np.array([-1.6, 0.4, 1.2]) - 0.002 * k,
        eye_dir=dirs[::-1].copy(),
        head_pos=np.array([-1.7, 0.4, 1.1]) + 0.001 * k,
        head_euler=np.column_stack([np.zeros(n), pitch, yaw]),
        states=np.ones((n, 3), dtype=np.int8),
        rate=rate,
    )


def _knock_out(stream, modality, rows):
    j = MODALITY_ORDER.index(modality)
    states = stream.states.copy()
    states[rows, j] = FrameState.MISSING
    update = {"states": states}
    for name in {"finger": ("finger_pos", "finger_dir"), "eye": ("eye_pos", "eye_dir"),
                 "head": ("head_pos", "head_euler")}[modality]:
        values = getattr(stream, name).copy()
        values[rows] = np.nan
        update[name] = values
    return stream.replace(**update)


# --- orientation ---

def test_euler_to_direction_reference_cases():
    assert euler_to_direction([0.0, 0.0, 0.0]) == pytest.approx([1.0, 0.0, 0.0])
    assert euler_to_direction([0.0, 0.0, math.pi / 2]) == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)
    # roll never moves the forward axis
    assert euler_to_direction([1.2, 0.1, 0.2]) == pytest.approx(euler_to_direction([0.0, 0.1, 0.2]))


def test_euler_to_direction_matches_matrix_composition():
    roll, pitch, yaw = 0.3, 0.2, -0.4
    rx = np.array([[1, 0, 0], [0, math.cos(roll), -math.sin(roll)], [0, math.sin(roll), math.cos(roll)]])
    ry = np.array([[math.cos(pitch), 0, math.sin(pitch)], [0, 1, 0], [-math.sin(pitch), 0, math.cos(pitch)]])
    rz = np.array([[math.cos(yaw), -math.sin(yaw), 0], [math.sin(yaw), math.cos(yaw), 0], [0, 0, 1]])
    oracle = rz @ ry @ rx
    assert euler_to_matrix([roll, pitch, yaw]) == pytest.approx(oracle, abs=1e-12)
    assert euler_to_direction([roll, pitch, yaw]) == pytest.approx(oracle @ [1.0, 0.0, 0.0], abs=1e-12)
    assert np.linalg.norm(euler_to_direction([roll, pitch, yaw])) == pytest.approx(1.0)


def test_matrix_to_euler_inverts_euler_to_matrix():
    e = np.array([[0.3, 0.2, -0.4], [-1.0, 0.7, 2.5], [0.0, -1.2, -3.0]])
    assert matrix_to_euler(euler_to_matrix(e)) == pytest.approx(e, abs=1e-12)


def test_yaw_pitch_round_trip():
    yaw, pitch = direction_to_yaw_pitch(yaw_pitch_to_direction(0.8, -0.3))
    assert (float(yaw), float(pitch)) == pytest.approx((0.8, -0.3))


# --- frames and streams ---

def test_modality_frame_validity_flags():
    frame = ModalityFrame(timestamp=0.0, eye_pos=(0, 0, 0), eye_dir=(1, 0, 0))
    assert frame.states == {"finger": FrameState.MISSING, "eye": FrameState.VALID, "head": FrameState.MISSING}
    with pytest.raises(ValueError):
        ModalityFrame(timestamp=0.0, eye_pos=(0, 0, 0))
    with pytest.raises(ValueError):
        ModalityFrame(timestamp=0.0, eye_pos=(0, 0, 0), eye_dir=(2, 0, 0))


def test_stream_rejects_non_increasing_timestamps():
    s = _linear_stream(5)
    ts = s.timestamps.copy()
    ts[3] = ts[2]
    with pytest.raises(ValueError):
        s.replace(timestamps=ts)


def test_stream_frames_round_trip_keeps_missing_modalities():
    s = _knock_out(_linear_stream(10), "eye", [2, 3])
    again = FrameStream.from_frames(s.frames(), s.rate)
    assert np.array_equal(again.states, s.states)
    assert np.allclose(again.finger_pos, s.finger_pos)
    assert np.isnan(again.eye_pos[2]).all()


# --- extrinsics ---

def test_transform_frame_identity_is_unchanged():
    frame = _linear_stream(3).frames()[1]
    out = transform_frame(frame, SensorExtrinsics.identity())
    assert out.states == frame.states
    for name in ("finger_pos", "finger_dir", "eye_pos", "eye_dir", "head_pos", "head_euler"):
        assert getattr(out, name) == pytest.approx(getattr(frame, name), abs=1e-12)


def test_transform_frame_known_extrinsics():
    quarter = RigidTransform(rotation=[[0, -1, 0], [1, 0, 0], [0, 0, 1]], translation=[1.0, 2.0, 3.0])
    ext = SensorExtrinsics(gcs=quarter, vcs=RigidTransform.identity())
    frame = ModalityFrame(timestamp=0.0, finger_pos=(1, 0, 0), finger_dir=(1, 0, 0),
                          head_pos=(0, 0, 0), head_euler=(0, 0, 0))
    out = transform_frame(frame, ext)
    assert out.finger_pos == pytest.approx((1.0, 3.0, 3.0))
    assert out.finger_dir == pytest.approx((0.0, 1.0, 0.0))
    assert out.head_euler == pytest.approx((0.0, 0.0, 0.0))
    assert out.states["eye"] == FrameState.MISSING

    ext = SensorExtrinsics(gcs=RigidTransform.identity(), vcs=quarter)
    out = transform_frame(frame, ext)
    assert out.head_euler[2] == pytest.approx(math.pi / 2)


def test_transform_stream_matches_per_frame_and_preserves_norms():
    rng = np.random.default_rng(4)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    ext = SensorExtrinsics(gcs=RigidTransform(rotation=q, translation=[0.5, -1.0, 1.2]),
                           vcs=RigidTransform(rotation=q.T, translation=[-0.9, 0.4, 1.0]))
    stream = _knock_out(_linear_stream(12), "finger", [4])
    moved = transform_stream(stream, ext)
    for frame, expected in zip(moved.frames(), stream.frames()):
        expected = transform_frame(expected, ext)
        assert frame.states == expected.states
        if frame.finger_dir is not None:
            assert frame.finger_dir == pytest.approx(expected.finger_dir, abs=1e-12)
            assert np.linalg.norm(frame.finger_dir) == pytest.approx(1.0, abs=1e-9)
        assert euler_to_direction(frame.head_euler) == pytest.approx(
            euler_to_direction(expected.head_euler), abs=1e-12)


# --- interpolation ---

def test_single_frame_gap_is_midpoint():
    s = _linear_stream(3)
    pos = np.array([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0], [2.0, 2.0, 2.0]])
    s = _knock_out(s.replace(finger_pos=pos), "finger", [1])
    filled = interpolate_gaps(s)
    assert filled.finger_pos[1] == pytest.approx([1.0, 1.0, 1.0])
    assert filled.states[1, 0] == FrameState.INTERPOLATED
    assert np.linalg.norm(filled.finger_dir[1]) == pytest.approx(1.0)


def test_no_gap_returns_stream_unchanged():
    s = _linear_stream(20)
    assert interpolate_gaps(s) is s


def test_linear_motion_is_recovered_exactly():
    truth = _linear_stream(40, jitter=0.002, seed=3)
    holed = _knock_out(truth, "eye", list(range(10, 15)))
    filled = interpolate_gaps(holed)
    assert np.max(np.abs(filled.eye_pos - truth.eye_pos)) < 1e-12


def test_boundary_gaps_hold_nearest_value_and_valid_frames_untouched():
    truth = _linear_stream(20)
    holed = _knock_out(_knock_out(truth, "head", [0, 1, 2]), "head", [18, 19])
    filled = interpolate_gaps(holed)
    assert np.allclose(filled.head_pos[:3], truth.head_pos[3])
    assert np.allclose(filled.head_pos[18:], truth.head_pos[17])
    assert np.array_equal(filled.head_pos[3:18], truth.head_pos[3:18])
    assert np.array_equal(filled.finger_dir, truth.finger_dir)


def test_interpolation_is_idempotent():
    holed = _knock_out(_knock_out(_linear_stream(30), "finger", [5, 6, 7]), "eye", [0, 29])
    once = interpolate_gaps(holed)
    twice = interpolate_gaps(once)
    for name in ("finger_pos", "finger_dir", "eye_pos", "eye_dir", "head_pos", "head_euler", "states"):
        assert np.array_equal(getattr(once, name), getattr(twice, name))


def test_head_yaw_interpolates_across_the_wrap():
    s = _linear_stream(3)
    euler = np.array([[0.0, 0.0, 3.1], [0.0, 0.0, 0.0], [0.0, 0.0, -3.1]])
    filled = interpolate_gaps(_knock_out(s.replace(head_euler=euler), "head", [1]))
    assert abs(filled.head_euler[1, 2]) == pytest.approx(math.pi, abs=1e-9)


def test_fully_missing_modality_raises():
    s = _knock_out(_linear_stream(10), "eye", list(range(10)))
    with pytest.raises(EmptyModalityError):
        interpolate_gaps(s)


# --- windowing ---

def test_window_centred_on_trigger():
    s = _linear_stream(100)
    idx = window_indices(s.timestamps, s.timestamps[50], s.rate)
    assert list(idx) == list(range(32, 68))


def test_window_too_close_to_start():
    s = _linear_stream(100)
    with pytest.raises(InsufficientCoverageError):
        extract_window(s, s.timestamps[0] + 0.1)


def test_window_with_jitter_matches_nearest_frame_oracle():
    s = _linear_stream(120, jitter=0.002, seed=9)
    trigger = 1.31
    idx = window_indices(s.timestamps, trigger, s.rate)
    ideal = trigger + (np.arange(36) - 18) / s.rate
    oracle = [int(np.argmin(np.abs(s.timestamps - t))) for t in ideal]
    assert list(idx) == oracle
    assert np.all(np.diff(s.timestamps[idx]) > 0)


def test_extract_window_layout():
    s = _linear_stream(100)
    sample = extract_window(s, s.timestamps[50])
    assert sample.values.shape == (36, len(FEATURE_ORDER), 3)
    assert sample.values[18, 0] == pytest.approx(s.finger_pos[50])
    assert sample.values[18, 5] == pytest.approx(euler_to_direction(s.head_euler[50]))


def test_extract_window_refuses_untracked_frames():
    s = _knock_out(_linear_stream(100), "finger", [50])
    with pytest.raises(EmptyModalityError):
        extract_window(s, s.timestamps[50])


def test_sample_tensor_shape_contract():
    with pytest.raises(ValueError):
        SampleTensor(values=np.zeros((35, 6, 3)))
    bad = np.zeros((36, 6, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        SampleTensor(values=bad)
