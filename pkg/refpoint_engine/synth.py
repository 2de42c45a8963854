"""
Synthetic referencing data.

Builds the default landmark scenario and simulates noisy, occluded
finger/eye/head streams for referencing events with exact ground truth.
Every event owns its own generator seeded from (corpus seed, user, event),
so a corpus is a pure function of its inputs and seed.
"""
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .corpus import (
    SCENARIO_NAME,
    CorpusManifest,
    EventHeader,
    ReferenceEvent,
    UserEntry,
    write_events,
    write_manifest,
)
from .errors import IoError, UsageError
from .frames import (
    MODALITY_ORDER,
    NOMINAL_RATE_HZ,
    FrameState,
    FrameStream,
    SensorExtrinsics,
    direction_to_yaw_pitch,
    euler_to_matrix,
    transform_stream,
    yaw_pitch_to_direction,
)
from .geo import (
    WGS84,
    Ellipsoid,
    GeodeticPoint,
    RigidTransform,
    car_pose_transform,
    geodetic_points_to_ecef,
    ground_truth_vector,
    prime_vertical_radius,
    wgs84_to_ecef,
)
from .scenario import CarPose, Poi, Roi, Scenario, categorize_bearing, save_scenario

logger = logging.getLogger(__name__)

ANGULAR_STATS_PATH = os.path.join(os.path.dirname(__file__), "..", "data", "angular_error_stats.json")

# --- default scenario layout (local east/north/up metres around the anchor) ---
ANCHOR_DEG = (48.220418, 11.724965, 490.0)
WHEELBASE_M = 2.9
TRACK_M = 1.6
FAR_POSE_DISTANCE_M = 100.0

# name -> (centre east, centre north, half east, half north, height)
ROI_LAYOUT = {
    "A": (0.0, 0.0, 2.0, 2.0, 6.0),
    "B": (7.0, 3.0, 1.5, 2.0, 4.0),
    "C": (-7.0, 3.0, 2.0, 1.5, 5.0),
    "D": (3.0, -6.0, 1.5, 1.5, 3.0),
    "E": (-4.0, -6.0, 2.0, 2.0, 4.0),
}
# pose id -> (front-axle east, north, heading deg clockwise from north, visible ROI names or None)
POSE_LAYOUT = {
    1: (-1.0, -22.0, 0.0, None),
    2: (-18.0, -10.0, 0.0, None),
    3: (18.0, -10.0, 0.0, None),
    4: (0.0, -130.0, 0.0, ("A", "B", "C")),
}
SCENARIO_COMMENT = (
    "Side convention ISO 8855: positive bearing is to the left. Pose 2 puts every ROI on the "
    "right and pose 3 every ROI on the left, following the written pose description; the "
    "check marks of the categorization table read mirrored against it. Pose 4 sees A, B and C "
    "only, more than 100 m away."
)

# --- event timing (seconds) ---
STREAM_S = 1.9
GAZE_ONSET_S = 0.3
GAZE_ONSET_SPREAD_S = 0.1
EYE_MOVE_S = 0.25
HEAD_MOVE_S = 0.35
FINGER_MOVE_S = 0.45
TRIGGER_JITTER_S = 0.4
TIMESTAMP_JITTER_S = 0.0015
TAIL_S = 0.5

# --- body geometry in the car frame (metres) ---
HEAD_BASE = np.array([-1.75, 0.37, 1.15])
EYE_OFFSET = np.array([0.09, 0.0, 0.02])
SHOULDER_OFFSET = {"right": np.array([0.0, -0.2, -0.3]), "left": np.array([0.0, 0.2, -0.3])}
FINGER_REST_PITCH = 0.5
REACH_REST_M = 0.35
REACH_EXTENDED_M = 0.65
SWAY_M = 0.01
SWAY_HZ = 0.7

YAW_BIAS_LIMIT = math.radians(170.0)
PITCH_LIMIT = math.radians(85.0)
# mean/SD ratio of a folded normal with zero location; below it a gamma is used
FOLDED_MIN_RATIO = math.sqrt(2.0 / (math.pi - 2.0))

DEFAULT_EXTRINSICS = SensorExtrinsics(
    gcs=RigidTransform(rotation=euler_to_matrix([0.0, 0.9, math.pi]), translation=[-1.3, 0.0, 1.45]),
    vcs=RigidTransform(rotation=euler_to_matrix([0.0, -0.15, math.pi]), translation=[-0.9, 0.37, 1.05]),
)

Seed = Union[int, Sequence[int]]


# ---------------------------------------------------------------------------
# behaviour models
# ---------------------------------------------------------------------------

class AxisNoise(BaseModel):
    """Target mean and SD (radians) of the per-event angular deviation magnitude."""
    model_config = ConfigDict(frozen=True)

    mean: float = Field(0.0, ge=0)
    sd: float = Field(0.0, ge=0)


class ModalityNoise(BaseModel):
    model_config = ConfigDict(frozen=True)

    yaw: AxisNoise = AxisNoise()
    pitch: AxisNoise = AxisNoise()


def _zero_noise():
    return {m: ModalityNoise() for m in MODALITY_ORDER}


class DriverProfile(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    noise: Dict[str, ModalityNoise] = Field(default_factory=_zero_noise)
    frame_jitter_rad: float = Field(math.radians(0.5), ge=0)
    finger_lag_s: float = Field(0.15, ge=0)
    left_hand_prob: float = Field(0.1, ge=0, le=1)
    # left hand near the edge of the gesture camera's view
    left_hand_dropout: float = Field(0.05, ge=0, le=1)
    left_hand_burst: float = Field(10.0, ge=1)
    # right arm crossing the face when pointing far left
    arm_occlusion_prob: float = Field(0.03, ge=0, le=1)
    arm_occlusion_burst: float = Field(8.0, ge=1)

    @field_validator("noise")
    @classmethod
    def _all_modalities(cls, value):
        unknown = set(value) - set(MODALITY_ORDER)
        if unknown:
            raise ValueError(f"unknown modalities in noise: {sorted(unknown)}")
        return {m: value.get(m, ModalityNoise()) for m in MODALITY_ORDER}

    @classmethod
    def noiseless(cls) -> "DriverProfile":
        return cls(frame_jitter_rad=0.0, left_hand_prob=0.0, left_hand_dropout=0.0, arm_occlusion_prob=0.0)

    def scaled(self, factor: float) -> "DriverProfile":
        """Same behaviour with every angular deviation multiplied by factor."""
        noise = {
            m: ModalityNoise(yaw=AxisNoise(mean=n.yaw.mean * factor, sd=n.yaw.sd * factor),
                             pitch=AxisNoise(mean=n.pitch.mean * factor, sd=n.pitch.sd * factor))
            for m, n in self.noise.items()
        }
        return self.model_copy(update={"noise": noise})

    def with_overrides(self, overrides: Dict) -> "DriverProfile":
        return DriverProfile(**{**self.model_dump(), **overrides})


class DropoutRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    prob: float = Field(0.0, ge=0, le=1)
    mean_burst: float = Field(1.0, ge=1)


class OcclusionModel(BaseModel):
    """Per (pose category, modality) burst-onset probability per frame and mean burst length."""
    model_config = ConfigDict(frozen=True)

    rules: Dict[str, Dict[str, DropoutRule]] = {}

    def rule(self, category: str, modality: str) -> DropoutRule:
        return self.rules.get(category, {}).get(modality, DropoutRule())

    @classmethod
    def none(cls) -> "OcclusionModel":
        return cls()

    @classmethod
    def default(cls) -> "OcclusionModel":
        near = {"finger": DropoutRule(prob=0.005, mean_burst=4), "eye": DropoutRule(prob=0.005, mean_burst=4),
                "head": DropoutRule(prob=0.002, mean_burst=3)}
        return cls(rules={
            "near-left": near,
            "near-right": near,
            # eyes leave the visual camera's view when the head turns hard right
            "far-right": {"finger": DropoutRule(prob=0.005, mean_burst=4),
                          "eye": DropoutRule(prob=0.06, mean_burst=15),
                          "head": DropoutRule(prob=0.01, mean_burst=5)},
            "far-left": {"finger": DropoutRule(prob=0.03, mean_burst=8),
                         "eye": DropoutRule(prob=0.01, mean_burst=6),
                         "head": DropoutRule(prob=0.005, mean_burst=4)},
        })

    @classmethod
    def from_config(cls, cfg: Optional[Dict]) -> "OcclusionModel":
        if not cfg:
            return cls.default()
        if cfg.get("enabled", True) is False:
            return cls.none()
        if "rules" in cfg:
            return cls(rules=cfg["rules"])
        return cls.default()


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _std_normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _folded_moments(mu: float, sigma: float = 1.0) -> Tuple[float, float]:
    r = mu / sigma
    mean = sigma * math.sqrt(2.0 / math.pi) * math.exp(-r * r / 2.0) + mu * (1.0 - 2.0 * _std_normal_cdf(-r))
    var = mu * mu + sigma * sigma - mean * mean
    return mean, math.sqrt(max(var, 0.0))


def fit_bias_distribution(mean: float, sd: float):
    """
    Distribution of |bias| with the requested mean and SD.

    Returns ("zero",), ("folded", mu, sigma) or ("gamma", shape, scale).
    """
    if mean <= 0:
        return ("zero",)
    if sd <= 0:
        return ("folded", mean, 0.0)
    ratio = mean / sd
    if ratio < FOLDED_MIN_RATIO:
        return ("gamma", ratio * ratio, sd * sd / mean)
    lo, hi = 0.0, 1.0
    while _folded_moments(hi)[0] / _folded_moments(hi)[1] < ratio:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m, s = _folded_moments(mid)
        if m / s < ratio:
            lo = mid
        else:
            hi = mid
    r = 0.5 * (lo + hi)
    sigma = mean / _folded_moments(r)[0]
    return ("folded", r * sigma, sigma)


def sample_bias_magnitude(rng: np.random.Generator, mean: float, sd: float, size=None):
    dist = fit_bias_distribution(mean, sd)
    if dist[0] == "zero":
        return np.zeros(size) if size is not None else 0.0
    if dist[0] == "gamma":
        return rng.gamma(dist[1], dist[2], size)
    return np.abs(rng.normal(dist[1], dist[2], size))


def load_angular_stats(path: Optional[str] = None) -> Dict:
    path = path or ANGULAR_STATS_PATH
    if not os.path.exists(path):
        raise IoError(f"angular statistics file not found: {path}")
    with open(path, "r") as f:
        return json.load(f)


def _profile_from_row(row: Dict, left_fraction: float) -> DriverProfile:
    noise = {}
    for m in MODALITY_ORDER:
        (ym, ys), (pm, ps) = row[m]["yaw"], row[m]["pitch"]
        noise[m] = ModalityNoise(
            yaw=AxisNoise(mean=math.radians(ym), sd=math.radians(ys)),
            pitch=AxisNoise(mean=math.radians(pm), sd=math.radians(ps)),
        )
    return DriverProfile(noise=noise, left_hand_prob=left_fraction)


def calibrate_profiles(pose: Optional[Union[int, str]] = None, path: Optional[str] = None):
    """
    Driver profiles whose per-event deviations target the tabulated means and SDs.

    Args:
        pose: None for {pose id: profile} over every pose, a pose id for one
              profile, or "all" for the pooled row

    Returns:
        DriverProfile or dict of them
    """
    table = load_angular_stats(path)
    fractions = table.get("left_hand_fraction", {})
    profiles = {}
    for row in table["angular_stats"]:
        key = row["pose"]
        profiles[key] = _profile_from_row(row, fractions.get(key, 0.1))
    if pose is None:
        return {int(k): v for k, v in profiles.items() if k != "all"}
    key = str(pose)
    if key not in profiles:
        raise UsageError(f"no angular statistics for pose {pose!r}")
    return profiles[key]


def profiles_from_config(cfg: Optional[Dict] = None, path: Optional[str] = None) -> Dict:
    """
    Per-pose profiles plus the pooled "all" entry, adjusted by a config section.

    Recognised keys: `noiseless` (bool), `scale` (float) and any DriverProfile
    field, applied in that order.
    """
    cfg = dict(cfg or {})
    noiseless = bool(cfg.pop("noiseless", False))
    scale = float(cfg.pop("scale", 1.0))
    if noiseless:
        profiles = {pid: DriverProfile.noiseless() for pid in calibrate_profiles(path=path)}
        profiles["all"] = DriverProfile.noiseless()
    else:
        profiles = calibrate_profiles(path=path)
        profiles["all"] = calibrate_profiles("all", path)
    out = {}
    for key, profile in profiles.items():
        if scale != 1.0:
            profile = profile.scaled(scale)
        if cfg:
            try:
                profile = profile.with_overrides(cfg)
            except ValueError as e:
                raise UsageError(f"invalid profile override: {e}")
        out[key] = profile
    return out


def left_hand_probability(fraction: float, left_handed: bool, left_handed_share: float) -> float:
    """Per-user left-hand probability keeping the population share at `fraction`."""
    p_left_user = max(fraction, 0.5)
    if left_handed:
        return p_left_user
    if left_handed_share >= 1.0:
        return fraction
    return float(np.clip((fraction - left_handed_share * p_left_user) / (1.0 - left_handed_share), 0.0, 1.0))


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

def _local_to_geodetic(east: float, north: float, up: float,
                       anchor: Tuple[float, float, float] = ANCHOR_DEG,
                       ell: Ellipsoid = WGS84) -> GeodeticPoint:
    lat0, lon0 = math.radians(anchor[0]), math.radians(anchor[1])
    alt0 = anchor[2]
    n = prime_vertical_radius(lat0, ell)
    meridian = ell.semi_major * (1.0 - ell.ecc_sq) / (1.0 - ell.ecc_sq * math.sin(lat0) ** 2) ** 1.5
    return GeodeticPoint(lat=lat0 + north / (meridian + alt0),
                         lon=lon0 + east / ((n + alt0) * math.cos(lat0)),
                         alt=alt0 + up)


def _tyre_points(east: float, north: float, heading_deg: float) -> Dict[str, GeodeticPoint]:
    h = math.radians(heading_deg)
    fwd = np.array([math.sin(h), math.cos(h)])
    left = np.array([-fwd[1], fwd[0]])
    front = np.array([east, north])
    local = {
        "FL": front + left * TRACK_M / 2,
        "FR": front - left * TRACK_M / 2,
        "RL": front - fwd * WHEELBASE_M + left * TRACK_M / 2,
        "RR": front - fwd * WHEELBASE_M - left * TRACK_M / 2,
    }
    return {k: _local_to_geodetic(v[0], v[1], 0.0) for k, v in local.items()}


def build_default_scenario() -> Scenario:
    """Four car poses around five box landmarks; two POIs on each box."""
    ell = WGS84
    rois, pois = [], []
    names = sorted(ROI_LAYOUT)
    for rid, name in enumerate(names):
        ce, cn, he, hn, height = ROI_LAYOUT[name]
        corners = [(ce + se * he, cn + sn * hn, z)
                   for se in (-1, 1) for sn in (-1, 1) for z in (0.0, height)]
        vertices = tuple(_local_to_geodetic(*c) for c in corners)
        rois.append(Roi(id=rid, name=name, vertices=vertices, ecef=geodetic_points_to_ecef(vertices, ell)))
        # centre of the south face at two thirds height, and its top south-west corner
        for k, (e, n, u) in enumerate([(ce, cn - hn, 2.0 * height / 3.0), (ce - he, cn - hn, height)]):
            point = _local_to_geodetic(e, n, u)
            pois.append(Poi(index=2 * rid + k, roi_id=rid, point=point,
                            ecef=wgs84_to_ecef(point, ell).as_array()))

    poses = []
    for pid, (east, north, heading, visible) in POSE_LAYOUT.items():
        tyres = _tyre_points(east, north, heading)
        visible_ids = tuple(names.index(v) for v in visible) if visible else None
        poses.append(CarPose(id=pid, tyres=tyres, transform=car_pose_transform(tyres, ell),
                             visible_rois=visible_ids))
    return Scenario(poses, rois, pois, ell, SCENARIO_COMMENT)


def is_far_pose(scenario: Scenario, pose_id: int) -> bool:
    return min(scenario.distance(pose_id, r) for r in scenario.visible_rois(pose_id)) >= FAR_POSE_DISTANCE_M


def event_targets(scenario: Scenario, pose_id: int, ref_type: str) -> List[int]:
    """Targets a driver can reference from a pose; point events skip far poses."""
    visible = scenario.visible_rois(pose_id)
    if ref_type == "volume":
        return visible
    if is_far_pose(scenario, pose_id):
        return []
    return [p.index for p in sorted(scenario.pois.values(), key=lambda p: p.index) if p.roi_id in visible]


# ---------------------------------------------------------------------------
# event generation
# ---------------------------------------------------------------------------

def _rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, (int, np.integer)):
        entropy = int(seed) % (1 << 64)
    else:
        entropy = [int(s) % (1 << 64) for s in seed]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _smoothstep(ts: np.ndarray, start: float, duration: float) -> np.ndarray:
    u = np.clip((ts - start) / duration, 0.0, 1.0) if duration > 0 else (ts >= start).astype(float)
    return u * u * (3.0 - 2.0 * u)


def _burst_mask(rng: np.random.Generator, n: int, prob: float, mean_burst: float) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if prob <= 0:
        return mask
    if prob >= 1:
        mask[:] = True
        return mask
    i = 0
    while i < n:
        if rng.random() < prob:
            length = int(rng.geometric(1.0 / mean_burst))
            mask[i:i + length] = True
            i += length
        else:
            i += 1
    return mask


def _combine(p: float, extra: float) -> float:
    return 1.0 - (1.0 - p) * (1.0 - extra)


def generate_event(scenario: Scenario, pose_id: int, target_id: int, ref_type: str,
                   profile: DriverProfile, occ: OcclusionModel, seed: Seed,
                   user_id: str = "user_00", event_id: Optional[str] = None,
                   left_hand: bool = False, extrinsics: SensorExtrinsics = DEFAULT_EXTRINSICS,
                   rate: float = NOMINAL_RATE_HZ) -> ReferenceEvent:
    """
    Simulate one referencing event in sensor coordinates.

    Gaze and head sweep from straight ahead onto the target plus a per-event
    bias; the finger follows `finger_lag_s` after the gaze fixates. The hold
    begins one frame after the last modality arrives and the trigger lands
    up to 0.4 s later.
    """
    pose = scenario.pose(pose_id)
    geometry, roi_id = scenario.target(target_id, ref_type)
    label = ground_truth_vector(geometry, pose.transform, ref_type).as_array()
    gt_yaw, gt_pitch = (float(a) for a in direction_to_yaw_pitch(label))
    category = categorize_bearing(gt_yaw)
    rng = _rng(seed)

    # timing
    t_on = GAZE_ONSET_S + GAZE_ONSET_SPREAD_S * rng.random()
    eye_arrive = t_on + EYE_MOVE_S
    head_arrive = t_on + HEAD_MOVE_S
    finger_arrive = eye_arrive + profile.finger_lag_s
    finger_start = max(0.0, finger_arrive - FINGER_MOVE_S)
    dwell = max(eye_arrive, head_arrive, finger_arrive) + 1.0 / rate
    trigger = dwell + TRIGGER_JITTER_S * rng.random()

    n = int(math.ceil(max(STREAM_S, trigger + TAIL_S) * rate))
    ts = np.arange(n) / rate
    ts[1:] += rng.uniform(-TIMESTAMP_JITTER_S, TIMESTAMP_JITTER_S, n - 1)

    # per-event bias, then per-frame jitter
    aim = {}
    for m in MODALITY_ORDER:
        noise = profile.noise[m]
        signs = np.where(rng.random(2) < 0.5, -1.0, 1.0)
        b_yaw = signs[0] * sample_bias_magnitude(rng, noise.yaw.mean, noise.yaw.sd)
        b_pitch = signs[1] * sample_bias_magnitude(rng, noise.pitch.mean, noise.pitch.sd)
        b_yaw = float(np.clip(b_yaw, -YAW_BIAS_LIMIT, YAW_BIAS_LIMIT))
        aim[m] = (gt_yaw + b_yaw, float(np.clip(gt_pitch + b_pitch, -PITCH_LIMIT, PITCH_LIMIT)))
    jitter = {m: rng.normal(0.0, profile.frame_jitter_rad, (n, 2)) for m in MODALITY_ORDER}
    sway_phase = rng.uniform(0.0, 2.0 * math.pi)

    s_eye = _smoothstep(ts, t_on, EYE_MOVE_S)
    s_head = _smoothstep(ts, t_on, HEAD_MOVE_S)
    s_finger = _smoothstep(ts, finger_start, finger_arrive - finger_start)

    eye_dir = yaw_pitch_to_direction(s_eye * aim["eye"][0] + jitter["eye"][:, 0],
                                     s_eye * aim["eye"][1] + jitter["eye"][:, 1])
    head_euler = np.stack([np.zeros(n),
                           s_head * aim["head"][1] + jitter["head"][:, 1],
                           s_head * aim["head"][0] + jitter["head"][:, 0]], axis=1)
    finger_pitch = FINGER_REST_PITCH + s_finger * (aim["finger"][1] - FINGER_REST_PITCH)
    finger_dir = yaw_pitch_to_direction(s_finger * aim["finger"][0] + jitter["finger"][:, 0],
                                        finger_pitch + jitter["finger"][:, 1])

    head_pos = np.tile(HEAD_BASE, (n, 1))
    head_pos[:, 1] += SWAY_M * np.sin(2.0 * math.pi * SWAY_HZ * ts + sway_phase)
    eye_pos = head_pos + euler_to_matrix(head_euler) @ EYE_OFFSET
    shoulder = HEAD_BASE + SHOULDER_OFFSET["left" if left_hand else "right"]
    reach = REACH_REST_M + s_finger * (REACH_EXTENDED_M - REACH_REST_M)
    finger_pos = shoulder + reach[:, None] * finger_dir

    car = FrameStream(timestamps=ts, finger_pos=finger_pos, finger_dir=finger_dir, eye_pos=eye_pos,
                      eye_dir=eye_dir, head_pos=head_pos, head_euler=head_euler,
                      states=np.full((n, len(MODALITY_ORDER)), int(FrameState.VALID)), rate=rate)
    to_sensor = SensorExtrinsics(gcs=extrinsics.gcs.inverse(), vcs=extrinsics.vcs.inverse())
    sensor = transform_stream(car, to_sensor)

    # occlusion knocks out validity only; the label is untouched
    arrays = {name: getattr(sensor, name).copy() for name in
              ("finger_pos", "finger_dir", "eye_pos", "eye_dir", "head_pos", "head_euler")}
    states = sensor.states.copy()
    fields = {"finger": ("finger_pos", "finger_dir"), "eye": ("eye_pos", "eye_dir"),
              "head": ("head_pos", "head_euler")}
    for j, m in enumerate(MODALITY_ORDER):
        rule = occ.rule(category, m)
        prob, burst = rule.prob, rule.mean_burst
        if m == "finger" and left_hand:
            prob, burst = _combine(prob, profile.left_hand_dropout), max(burst, profile.left_hand_burst)
        if m in ("eye", "head") and not left_hand and category == "far-left":
            prob, burst = _combine(prob, profile.arm_occlusion_prob), max(burst, profile.arm_occlusion_burst)
        missing = _burst_mask(rng, n, prob, burst)
        states[missing, j] = int(FrameState.MISSING)
        for name in fields[m]:
            arrays[name][missing] = np.nan

    stream = sensor.replace(states=states, **arrays)
    header = EventHeader(
        event_id=event_id or f"{user_id}_p{pose_id}_{ref_type}_{target_id}",
        user_id=user_id, pose_id=pose_id, target_id=target_id, roi_id=roi_id, ref_type=ref_type,
        trigger_ts=float(trigger), rate=rate, n_frames=n, label=tuple(float(c) for c in label),
        category=category, left_hand=left_hand, extrinsics=extrinsics.to_dict(),
    )
    return ReferenceEvent(header=header, stream=stream)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def _user_plan(scenario: Scenario, ref_types: Sequence[str]) -> List[Tuple[int, str, int]]:
    return [(pid, ref, target) for ref in ref_types for pid in scenario.pose_ids
            for target in event_targets(scenario, pid, ref)]


def generate_user_events(scenario: Scenario, user_idx: int, events_per_user: int, seed: int,
                         profiles: Dict, occ: OcclusionModel, ref_types: Sequence[str],
                         left_handed_share: float, behaviour_spread: float = 0.25):
    user_id = f"user_{user_idx:02d}"
    user_rng = _rng([seed, 1, user_idx])
    left_handed = bool(user_rng.random() < left_handed_share)
    # lognormal scale with unit mean
    scale = float(np.exp(user_rng.normal(-behaviour_spread ** 2 / 2.0, behaviour_spread)))
    plan = _user_plan(scenario, ref_types)
    if not plan:
        raise UsageError("scenario offers no referencing targets for the requested types")
    # every plan item once per pass, passes cut short at random
    order = user_rng.permutation(np.resize(user_rng.permutation(len(plan)), events_per_user))

    events = []
    for e_idx, k in enumerate(order):
        pose_id, ref_type, target = plan[int(k)]
        base = profiles.get(pose_id, profiles.get("all"))
        if base is None:
            raise UsageError(f"no driver profile for pose {pose_id}")
        profile = base.scaled(scale)
        ev_rng = _rng([seed, 2, user_idx, e_idx])
        p_left = left_hand_probability(profile.left_hand_prob, left_handed, left_handed_share)
        left_hand = bool(ev_rng.random() < p_left)
        events.append(generate_event(
            scenario, pose_id, target, ref_type, profile, occ,
            seed=[seed, 3, user_idx, e_idx], user_id=user_id,
            event_id=f"{user_id}_e{e_idx:04d}", left_hand=left_hand))
    entry = UserEntry(id=user_id, files=[f"{user_id}.jsonl"], n_events=len(events),
                      left_handed=left_handed, behaviour_scale=round(scale, 6))
    return entry, events


def generate_corpus(scenario: Scenario, n_users: int, events_per_user: int, seed: int,
                    out_dir: Optional[str] = None, ref_types: Sequence[str] = ("volume", "point"),
                    profiles: Optional[Dict] = None, occ: Optional[OcclusionModel] = None,
                    jobs: int = 1, left_handed_share: Optional[float] = None):
    """
    Simulate a multi-user corpus, optionally writing it to out_dir.

    Returns:
        (CorpusManifest, list of ReferenceEvent in user order)
    """
    if n_users < 2:
        raise UsageError(f"a corpus needs at least 2 users, got {n_users}")
    if events_per_user < 1:
        raise UsageError("events_per_user must be >= 1")
    if out_dir is not None and not os.path.isdir(os.path.dirname(os.path.abspath(out_dir))):
        raise IoError(f"parent of output directory does not exist: {out_dir}")
    table = load_angular_stats()
    if profiles is None:
        profiles = calibrate_profiles()
        profiles["all"] = calibrate_profiles("all")
    occ = occ if occ is not None else OcclusionModel.default()
    if left_handed_share is None:
        left_handed_share = float(table.get("left_handed_user_probability", 4.0 / 28.0))

    logger.info(f"🔄 Generating {n_users} users x {events_per_user} events (seed={seed}, jobs={jobs})")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(
            lambda u: generate_user_events(scenario, u, events_per_user, seed, profiles, occ,
                                           ref_types, left_handed_share),
            range(n_users)))

    manifest = CorpusManifest(users=[entry for entry, _ in results], scenario_file=SCENARIO_NAME,
                              seed=seed, events_per_user=events_per_user, ref_types=list(ref_types))
    events = [e for _, chunk in results for e in chunk]
    for entry, chunk in results:
        logger.info(f"📊 {entry.id}: {entry.n_events} events, "
                    f"{sum(e.header.left_hand for e in chunk)} left-hand")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_scenario(scenario, os.path.join(out_dir, SCENARIO_NAME))
        for entry, chunk in results:
            write_events(os.path.join(out_dir, entry.files[0]), chunk)
        write_manifest(out_dir, manifest)
        logger.info(f"💾 Corpus written to {out_dir}: {len(events)} events")
    return manifest, events
