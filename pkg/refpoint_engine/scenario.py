"""
Scenario: car poses, ROI boxes and POIs, plus the scenario JSON file format.

File layout (degrees on disk, radians in memory):
    {
      "ellipsoid": {"semi_major": ..., "semi_minor": ...},
      "car_poses": [{"id": 1, "tyres": {"FL": [lat, lon, alt], ...}, "visible_rois": [...]}],
      "rois": [{"id": 0, "name": "A", "vertices": [[lat, lon, alt], ... x8]}],
      "pois": [{"index": 0, "roi_id": 0, "point": [lat, lon, alt]}],
      "comment": "..."
    }
"""
import json
import logging
import math
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import FormatError, IoError, UnknownPoseError, UnknownTargetError
from .geo import (
    TYRE_LABELS,
    WGS84,
    Ellipsoid,
    GeodeticPoint,
    RigidTransform,
    car_pose_transform,
    geodetic_points_to_ecef,
    wgs84_to_ecef,
)
from .matching import RoiMap

logger = logging.getLogger(__name__)

REF_TYPES = ("volume", "point")
CATEGORY_LIMIT_RAD = math.radians(45.0)
CATEGORIES = ("far-left", "near-left", "near-right", "far-right")


# --- file models (degrees) ---

class CarPoseEntry(BaseModel):
    id: int
    tyres: Dict[str, Tuple[float, float, float]]
    visible_rois: Optional[List[int]] = None

    @field_validator("tyres")
    @classmethod
    def _labelled(cls, value):
        missing = [k for k in TYRE_LABELS if k not in value]
        if missing:
            raise ValueError(f"tyres missing labels {missing}")
        return value


class RoiEntry(BaseModel):
    id: int
    name: str = ""
    vertices: List[Tuple[float, float, float]] = Field(min_length=8, max_length=8)


class PoiEntry(BaseModel):
    index: int
    roi_id: int
    point: Tuple[float, float, float]


class EllipsoidEntry(BaseModel):
    semi_major: float = WGS84.semi_major
    semi_minor: float = WGS84.semi_minor


class ScenarioFile(BaseModel):
    ellipsoid: EllipsoidEntry = EllipsoidEntry()
    car_poses: List[CarPoseEntry] = Field(min_length=1)
    rois: List[RoiEntry] = Field(min_length=1)
    pois: List[PoiEntry] = []
    comment: str = ""


def _geo(triple) -> GeodeticPoint:
    return GeodeticPoint.from_degrees(*triple)


# --- in-memory scenario (radians / ECEF) ---

class CarPose(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    tyres: Dict[str, GeodeticPoint]
    transform: RigidTransform
    visible_rois: Optional[Tuple[int, ...]] = None


class Roi(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    id: int
    name: str = ""
    vertices: Tuple[GeodeticPoint, ...]
    ecef: np.ndarray


class Poi(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    index: int
    roi_id: int
    point: GeodeticPoint
    ecef: np.ndarray


def categorize_bearing(bearing: float) -> str:
    """Positive bearing is to the left (ISO 8855); 45 degrees splits near from far."""
    if bearing >= 0:
        return "near-left" if bearing < CATEGORY_LIMIT_RAD else "far-left"
    return "near-right" if bearing > -CATEGORY_LIMIT_RAD else "far-right"


class Scenario:
    """Car poses plus the landmark set they look at."""

    def __init__(self, poses: List[CarPose], rois: List[Roi], pois: List[Poi],
                 ellipsoid: Ellipsoid = WGS84, comment: str = ""):
        if not rois:
            raise FormatError("scenario needs at least one ROI")
        if not poses:
            raise FormatError("scenario needs at least one car pose")
        self.ellipsoid = ellipsoid
        self.poses = {p.id: p for p in poses}
        self.rois = {r.id: r for r in rois}
        self.pois = {p.index: p for p in pois}
        self.comment = comment
        for poi in pois:
            if poi.roi_id not in self.rois:
                raise FormatError(f"POI {poi.index} points at unknown ROI {poi.roi_id}")

    # lookups
    def pose(self, pose_id: int) -> CarPose:
        if pose_id not in self.poses:
            raise UnknownPoseError(f"unknown car pose {pose_id}; have {sorted(self.poses)}")
        return self.poses[pose_id]

    def roi(self, roi_id: int) -> Roi:
        if roi_id not in self.rois:
            raise UnknownTargetError(f"unknown ROI {roi_id}; have {sorted(self.rois)}")
        return self.rois[roi_id]

    def poi(self, index: int) -> Poi:
        if index not in self.pois:
            raise UnknownTargetError(f"unknown POI {index}; have {sorted(self.pois)}")
        return self.pois[index]

    @property
    def pose_ids(self) -> List[int]:
        return sorted(self.poses)

    @property
    def roi_ids(self) -> List[int]:
        return sorted(self.rois)

    def visible_rois(self, pose_id: int) -> List[int]:
        pose = self.pose(pose_id)
        if pose.visible_rois is None:
            return self.roi_ids
        return sorted(pose.visible_rois)

    def target(self, target_id: int, ref_type: str) -> Tuple[np.ndarray, int]:
        """ECEF target geometry and the ROI it belongs to."""
        if ref_type == "volume":
            return self.roi(target_id).ecef, target_id
        if ref_type == "point":
            poi = self.poi(target_id)
            return poi.ecef, poi.roi_id
        raise UnknownTargetError(f"unknown reference type {ref_type!r}")

    def roi_map(self, roi_ids: Optional[List[int]] = None) -> RoiMap:
        ids = roi_ids if roi_ids is not None else self.roi_ids
        return RoiMap(ids=list(ids), vertices=np.stack([self.roi(i).ecef for i in ids]))

    def bearing(self, pose_id: int, roi_id: int) -> float:
        centre = self.pose(pose_id).transform.apply(self.roi(roi_id).ecef).mean(axis=0)
        return math.atan2(centre[1], centre[0])

    def distance(self, pose_id: int, roi_id: int) -> float:
        centre = self.pose(pose_id).transform.apply(self.roi(roi_id).ecef).mean(axis=0)
        return float(np.linalg.norm(centre))

    def categorization(self) -> Dict[int, Dict[int, str]]:
        return {pid: {rid: categorize_bearing(self.bearing(pid, rid)) for rid in self.roi_ids}
                for pid in self.pose_ids}

    # file I/O
    def to_file_model(self) -> ScenarioFile:
        def deg(p: GeodeticPoint):
            return tuple(p.to_degrees())

        return ScenarioFile(
            ellipsoid=EllipsoidEntry(semi_major=self.ellipsoid.semi_major,
                                     semi_minor=self.ellipsoid.semi_minor),
            car_poses=[CarPoseEntry(id=p.id, tyres={k: deg(v) for k, v in p.tyres.items()},
                                    visible_rois=list(p.visible_rois) if p.visible_rois is not None else None)
                       for p in self.poses.values()],
            rois=[RoiEntry(id=r.id, name=r.name, vertices=[deg(v) for v in r.vertices])
                  for r in self.rois.values()],
            pois=[PoiEntry(index=p.index, roi_id=p.roi_id, point=deg(p.point)) for p in self.pois.values()],
            comment=self.comment,
        )

    @classmethod
    def from_file_model(cls, model: ScenarioFile) -> "Scenario":
        ell = Ellipsoid(semi_major=model.ellipsoid.semi_major, semi_minor=model.ellipsoid.semi_minor)
        poses = []
        for entry in model.car_poses:
            tyres = {k: _geo(v) for k, v in entry.tyres.items()}
            poses.append(CarPose(
                id=entry.id, tyres=tyres, transform=car_pose_transform(tyres, ell),
                visible_rois=tuple(entry.visible_rois) if entry.visible_rois is not None else None))
        rois = []
        for entry in model.rois:
            vertices = tuple(_geo(v) for v in entry.vertices)
            rois.append(Roi(id=entry.id, name=entry.name, vertices=vertices,
                            ecef=geodetic_points_to_ecef(vertices, ell)))
        pois = []
        for entry in model.pois:
            point = _geo(entry.point)
            pois.append(Poi(index=entry.index, roi_id=entry.roi_id, point=point,
                            ecef=wgs84_to_ecef(point, ell).as_array()))
        return cls(poses, rois, pois, ell, model.comment)


def save_scenario(scenario: Scenario, path: str) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise IoError(f"cannot write scenario, directory does not exist: {parent}")
    with open(path, "w") as f:
        f.write(scenario.to_file_model().model_dump_json(indent=2))
    logger.info(f"💾 Scenario written to {path}")
    return path


def load_scenario(path: str) -> Scenario:
    if not os.path.exists(path):
        raise IoError(f"scenario file not found: {path}")
    try:
        with open(path, "r") as f:
            model = ScenarioFile(**json.load(f))
    except json.JSONDecodeError as e:
        raise FormatError(f"scenario file {path} is not valid JSON: {e}")
    except ValidationError as e:
        raise FormatError(f"scenario file {path} is malformed: {e}")
    scenario = Scenario.from_file_model(model)
    logger.info(f"✅ Loaded scenario {path}: {len(scenario.poses)} poses, {len(scenario.rois)} ROIs, "
                f"{len(scenario.pois)} POIs")
    return scenario
