"""
Map a fused pointing direction onto the referenced ROI.

The default method boxes each ROI by the componentwise min/max of its
normalised car-frame vertex directions and measures the clamp distance of the
normalised fused vector to that box. Zero-distance ties go to the ROI whose
vertex mean is closest in angle; remaining exact ties go to the lowest id.
"""
import logging
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import UsageError, ZeroVectorError
from .geo import RigidTransform

logger = logging.getLogger(__name__)

MIN_NORM = 1e-12
METHODS = ("direction_box", "ray_box")


class RoiMap(BaseModel):
    """ROI boxes as (n, 8, 3) vertices, ECEF unless paired with an identity pose."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    ids: List[int]
    vertices: np.ndarray

    @field_validator("vertices", mode="before")
    @classmethod
    def _as_array(cls, value):
        return np.array(value, dtype=np.float64)

    @model_validator(mode="after")
    def _check(self):
        v = self.vertices
        if v.ndim != 3 or v.shape[1:] != (8, 3):
            raise ValueError(f"ROI map must be (n, 8, 3), got {v.shape}")
        if len(self.ids) != v.shape[0] or v.shape[0] < 1:
            raise ValueError("ROI map needs one id per box and at least one box")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("ROI ids must be unique")
        # the vertices must span a volume, not a face or an edge
        for rid, box in zip(self.ids, v):
            if np.linalg.matrix_rank(box - box.mean(axis=0), tol=1e-6) < 3:
                raise ValueError(f"ROI {rid} is degenerate (no volume)")
        self.vertices.setflags(write=False)
        return self

    def __len__(self):
        return len(self.ids)


class MatchResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    roi_id: int
    distances: Dict[int, float]
    proximity: Dict[int, float]
    ranking: List[int]
    method: str = "direction_box"

    def to_dict(self):
        return {
            "roi_id": self.roi_id,
            "ranking": self.ranking,
            "method": self.method,
            "rois": [{"id": rid, "distance": self.distances[rid], "centroid_angle_rad": self.proximity[rid]}
                     for rid in self.ranking],
        }


def _unit_fused(fused) -> np.ndarray:
    v = np.asarray(fused, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if not n > MIN_NORM:
        raise ZeroVectorError(f"fused vector norm {n:.3e} is too small to match")
    return v / n


def _angles(v_hat: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    cos = vectors @ v_hat / np.linalg.norm(vectors, axis=-1)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def clamp_distances(v_hat: np.ndarray, car_vertices: np.ndarray) -> np.ndarray:
    """Per-ROI clamp distance of v_hat to the box of normalised vertex directions."""
    hat = car_vertices / np.linalg.norm(car_vertices, axis=-1, keepdims=True)
    lo = hat.min(axis=1)
    hi = hat.max(axis=1)
    per_axis = np.maximum(np.maximum(lo - v_hat, 0.0), v_hat - hi)
    return np.linalg.norm(per_axis, axis=1)


def ray_box_distances(v_hat: np.ndarray, car_vertices: np.ndarray) -> np.ndarray:
    """
    Slab test of the ray origin + s*v_hat (s >= 0) against each ROI's car-frame AABB.

    Returns 0 for a hit, otherwise the smallest angle to a vertex direction.
    """
    lo = car_vertices.min(axis=1)
    hi = car_vertices.max(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / v_hat
        t0 = lo * inv
        t1 = hi * inv
    t_near = np.minimum(t0, t1)
    t_far = np.maximum(t0, t1)
    # a zero component only hits when the origin lies inside that slab
    parallel = v_hat == 0.0
    outside = parallel & ((lo > 0) | (hi < 0))
    t_near = np.where(parallel, -np.inf, t_near)
    t_far = np.where(parallel, np.inf, t_far)
    enter = t_near.max(axis=1)
    exit_ = t_far.min(axis=1)
    hit = (exit_ >= np.maximum(enter, 0.0)) & ~outside.any(axis=1)
    nearest = np.array([_angles(v_hat, box).min() for box in car_vertices])
    return np.where(hit, 0.0, nearest)


def _score(fused, rois: RoiMap, pose: RigidTransform, method: str):
    if method not in METHODS:
        raise UsageError(f"unknown match method {method!r}")
    v_hat = _unit_fused(fused)
    car = pose.apply(rois.vertices.reshape(-1, 3)).reshape(rois.vertices.shape)
    if method == "direction_box":
        d = clamp_distances(v_hat, car)
    else:
        d = ray_box_distances(v_hat, car)
    proximity = _angles(v_hat, car.mean(axis=1))
    return d, proximity


def _order(ids: Sequence[int], d: np.ndarray, proximity: np.ndarray) -> List[int]:
    keys = sorted(range(len(ids)), key=lambda i: (d[i], proximity[i], ids[i]))
    return [ids[i] for i in keys]


def rank_rois(fused, rois: RoiMap, pose: RigidTransform, method: str = "direction_box") -> List[int]:
    """All ROI ids ordered by (distance, centroid angle, id)."""
    d, proximity = _score(fused, rois, pose, method)
    return _order(rois.ids, d, proximity)


def match_roi(fused, rois: RoiMap, pose: RigidTransform, method: str = "direction_box") -> MatchResult:
    d, proximity = _score(fused, rois, pose, method)
    ranking = _order(rois.ids, d, proximity)
    return MatchResult(
        roi_id=ranking[0],
        distances={rid: float(x) for rid, x in zip(rois.ids, d)},
        proximity={rid: float(x) for rid, x in zip(rois.ids, proximity)},
        ranking=ranking,
        method=method,
    )


def rank_batch(preds: np.ndarray, rois: RoiMap, poses: Sequence[RigidTransform],
               method: str = "direction_box") -> List[List[int]]:
    """Rankings for a batch of predictions, each with its own car pose."""
    return [rank_rois(p, rois, t, method) for p, t in zip(np.asarray(preds), poses)]
