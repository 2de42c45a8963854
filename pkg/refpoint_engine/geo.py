"""
Geodetic -> ECEF -> vehicle frame machinery and ground-truth vectors.

Conventions:
- angles are radians internally; degrees only at file/CLI boundaries
- vehicle frame is ISO 8855 (x forward, y left, z up), origin at the centre
  of the front axle (midpoint of the two front tyre contact points)
"""
import logging
import math
from typing import Dict, Iterable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import DegenerateFootprintError, OriginTargetError, ShapeMismatchError, ZeroVectorError

logger = logging.getLogger(__name__)

WGS84_SEMI_MAJOR = 6378137.0
WGS84_SEMI_MINOR = 6356752.3142

ORTHONORMAL_TOL = 1e-9
MIN_TYRE_SPACING_M = 0.5
COLLINEAR_TOL_M = 0.05
ORIGIN_TOL_M = 1e-3
TYRE_LABELS = ("FL", "FR", "RL", "RR")


class GeodeticPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    lat: float
    lon: float
    alt: float = 0.0

    @field_validator("lat")
    @classmethod
    def _lat_range(cls, value):
        if not abs(value) <= math.pi / 2 + 1e-12:
            raise ValueError(f"latitude {value} rad outside [-pi/2, pi/2]")
        return value

    @field_validator("lon")
    @classmethod
    def _lon_range(cls, value):
        if not abs(value) <= math.pi + 1e-12:
            raise ValueError(f"longitude {value} rad outside [-pi, pi]")
        return value

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float, alt: float = 0.0) -> "GeodeticPoint":
        return cls(lat=math.radians(lat_deg), lon=math.radians(lon_deg), alt=alt)

    def to_degrees(self):
        return [math.degrees(self.lat), math.degrees(self.lon), self.alt]


class Ellipsoid(BaseModel):
    """Reference ellipsoid; e^2 is always derived from the axes."""
    model_config = ConfigDict(frozen=True)

    semi_major: float = WGS84_SEMI_MAJOR
    semi_minor: float = WGS84_SEMI_MINOR

    @model_validator(mode="after")
    def _axes_order(self):
        if not (0 < self.semi_minor <= self.semi_major):
            raise ValueError("ellipsoid needs 0 < b <= a")
        return self

    @property
    def ecc_sq(self) -> float:
        return 1.0 - (self.semi_minor ** 2) / (self.semi_major ** 2)


WGS84 = Ellipsoid()


class EcefPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    z: float

    @model_validator(mode="after")
    def _finite(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError("ECEF components must be finite")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


class CarVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    z: float
    normalized: bool = False

    @model_validator(mode="after")
    def _unit_when_flagged(self):
        if self.normalized:
            norm = math.sqrt(self.x ** 2 + self.y ** 2 + self.z ** 2)
            if abs(norm - 1.0) > 1e-9:
                raise ValueError(f"normalized CarVector has norm {norm}")
        return self

    @classmethod
    def from_array(cls, values, normalized: bool = False) -> "CarVector":
        x, y, z = (float(v) for v in values)
        return cls(x=x, y=y, z=z, normalized=normalized)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


class RigidTransform(BaseModel):
    """p_out = rotation @ p_in + translation."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation", mode="before")
    @classmethod
    def _proper_rotation(cls, value):
        r = np.array(value, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        return r

    @field_validator("translation", mode="before")
    @classmethod
    def _translation_shape(cls, value):
        t = np.array(value, dtype=np.float64).reshape(-1)
        if t.shape != (3,):
            raise ValueError(f"translation must have 3 components, got {t.shape}")
        t.setflags(write=False)
        return t

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_rotation(self, vectors) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        return v @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        r_inv = self.rotation.T
        return RigidTransform(rotation=r_inv, translation=-r_inv @ self.translation)

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """self after inner."""
        return RigidTransform(rotation=self.rotation @ inner.rotation,
                              translation=self.rotation @ inner.translation + self.translation)

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data) -> "RigidTransform":
        return cls(rotation=np.array(data["rotation"], dtype=np.float64),
                   translation=np.array(data["translation"], dtype=np.float64))


def prime_vertical_radius(lat: float, ell: Ellipsoid = WGS84) -> float:
    """N(lat) = a / sqrt(1 - e^2 sin^2 lat)."""
    s = math.sin(lat)
    return ell.semi_major / math.sqrt(1.0 - ell.ecc_sq * s * s)


def wgs84_to_ecef(p: GeodeticPoint, ell: Ellipsoid = WGS84) -> EcefPoint:
    n = prime_vertical_radius(p.lat, ell)
    cos_lat = math.cos(p.lat)
    x = (n + p.alt) * cos_lat * math.cos(p.lon)
    y = (n + p.alt) * cos_lat * math.sin(p.lon)
    z = (1.0 - ell.ecc_sq) * (n + p.alt) * math.sin(p.lat)
    return EcefPoint(x=x, y=y, z=z)


def geodetic_array_to_ecef(llh, ell: Ellipsoid = WGS84) -> np.ndarray:
    """
    Vectorised wgs84_to_ecef.

    Args:
        llh: (..., 3) array of [lat rad, lon rad, alt m]

    Returns:
        (..., 3) array of ECEF metres
    """
    llh = np.asarray(llh, dtype=np.float64)
    lat, lon, alt = llh[..., 0], llh[..., 1], llh[..., 2]
    n = ell.semi_major / np.sqrt(1.0 - ell.ecc_sq * np.sin(lat) ** 2)
    x = (n + alt) * np.cos(lat) * np.cos(lon)
    y = (n + alt) * np.cos(lat) * np.sin(lon)
    z = (1.0 - ell.ecc_sq) * (n + alt) * np.sin(lat)
    return np.stack([x, y, z], axis=-1)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ZeroVectorError("cannot normalise a zero vector")
    return v / n


def car_pose_transform_ecef(fl, fr, rl, rr) -> RigidTransform:
    """
    Fit the ECEF -> car transform from four tyre contact points in ECEF.

    Origin is the front-axle midpoint, x points from the rear-axle midpoint to
    the front one, z is the footprint plane normal (oriented by the left/right
    labels so that the frame is right-handed with y to the left).
    """
    pts = np.array([fl, fr, rl, rr], dtype=np.float64)
    for i in range(4):
        for j in range(i + 1, 4):
            gap = np.linalg.norm(pts[i] - pts[j])
            if gap <= MIN_TYRE_SPACING_M:
                raise DegenerateFootprintError(
                    f"tyres {TYRE_LABELS[i]} and {TYRE_LABELS[j]} only {gap:.3f} m apart")

    centred = pts - pts.mean(axis=0)
    _, singular, vt = np.linalg.svd(centred)
    if singular[1] < COLLINEAR_TOL_M:
        raise DegenerateFootprintError(
            f"tyre contact points are collinear (second singular value {singular[1]:.2e} m)")

    front_mid = 0.5 * (pts[0] + pts[1])
    rear_mid = 0.5 * (pts[2] + pts[3])
    forward = _unit(front_mid - rear_mid)
    left = _unit((pts[0] + pts[2]) - (pts[1] + pts[3]))

    normal = vt[2]
    if np.dot(normal, np.cross(forward, left)) < 0:
        normal = -normal
    x_axis = _unit(forward - np.dot(forward, normal) * normal)
    z_axis = _unit(normal)
    y_axis = np.cross(z_axis, x_axis)

    rotation = np.vstack([x_axis, y_axis, z_axis])
    translation = -rotation @ front_mid
    return RigidTransform(rotation=rotation, translation=translation)


def car_pose_transform(tyre_points: Dict[str, GeodeticPoint], ell: Ellipsoid = WGS84) -> RigidTransform:
    """ECEF -> car transform from labelled (FL/FR/RL/RR) geodetic tyre points."""
    missing = [k for k in TYRE_LABELS if k not in tyre_points]
    if missing:
        raise DegenerateFootprintError(f"missing tyre labels: {missing}")
    ecef = [wgs84_to_ecef(tyre_points[k], ell).as_array() for k in TYRE_LABELS]
    return car_pose_transform_ecef(*ecef)


def ecef_to_car(p, t: RigidTransform) -> CarVector:
    values = p.as_array() if isinstance(p, EcefPoint) else np.asarray(p, dtype=np.float64)
    return CarVector.from_array(t.apply(values))


def ground_truth_vector(target, t: RigidTransform, ref_type: str) -> CarVector:
    """
    Unit vector from the car origin towards the target.

    Args:
        target: ECEF point (3,) for 'point', ECEF vertices (N, 3) for 'volume'
        t: ECEF -> car transform
        ref_type: 'point' or 'volume'

    Returns:
        normalized CarVector
    """
    arr = np.asarray(target.as_array() if isinstance(target, EcefPoint) else target, dtype=np.float64)
    if ref_type == "point":
        aim = t.apply(arr.reshape(3))
    elif ref_type == "volume":
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 3:
            raise ShapeMismatchError(f"volume target needs >= 3 vertices of 3 coords, got {arr.shape}")
        aim = t.apply(arr).mean(axis=0)
    else:
        raise ValueError(f"unknown reference type {ref_type!r}")

    distance = np.linalg.norm(aim)
    if distance < ORIGIN_TOL_M:
        raise OriginTargetError(f"target is {distance * 1000:.3f} mm from the car origin")
    return CarVector.from_array(aim / distance, normalized=True)


def angle_between(u, v) -> np.ndarray:
    """Row-wise angle (rad) between vectors; works on (3,) or (N, 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu < 1e-12) or np.any(nv < 1e-12):
        raise ZeroVectorError("angle undefined for a zero vector")
    cos = np.sum(u * v, axis=-1) / (nu * nv)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def footprint_from_transform(t: RigidTransform, wheelbase: float = 2.9,
                             track: float = 1.6) -> Dict[str, np.ndarray]:
    """ECEF tyre points of a rectangular footprint placed at a known pose."""
    inv = t.inverse()
    local = {
        "FL": [0.0, track / 2, 0.0],
        "FR": [0.0, -track / 2, 0.0],
        "RL": [-wheelbase, track / 2, 0.0],
        "RR": [-wheelbase, -track / 2, 0.0],
    }
    return {k: inv.apply(np.array(v)) for k, v in local.items()}


def geodetic_points_to_ecef(points: Iterable[GeodeticPoint], ell: Optional[Ellipsoid] = None) -> np.ndarray:
    ell = ell or WGS84
    return np.array([wgs84_to_ecef(p, ell).as_array() for p in points])
