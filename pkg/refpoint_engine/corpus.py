"""
Referencing-event corpus: JSON Lines event files, the manifest, and dataset
assembly (extrinsics -> gap interpolation -> 36-frame window) for training.

Event files hold one user each. Every event is a header line
`{"header": {...}}` followed by `n_frames` ModalityFrame lines.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import CorpusError, DataError, EmptyFilterError, FormatError, IoError
from .frames import (
    MODALITY_ORDER,
    FrameState,
    FrameStream,
    ModalityFrame,
    SampleMeta,
    SensorExtrinsics,
    extract_window,
    interpolate_gaps,
    transform_stream,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SCENARIO_NAME = "scenario.json"


class EventHeader(BaseModel):
    model_config = ConfigDict(frozen=True)

    event_id: str
    user_id: str
    pose_id: int
    target_id: int
    roi_id: int
    ref_type: str
    trigger_ts: float
    rate: float
    n_frames: int
    label: Tuple[float, float, float]
    category: str = ""
    left_hand: bool = False
    extrinsics: Dict


class ReferenceEvent(BaseModel):
    """One labelled referencing event as recorded in sensor coordinates."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    header: EventHeader
    stream: FrameStream

    @property
    def extrinsics(self) -> SensorExtrinsics:
        return SensorExtrinsics.from_dict(self.header.extrinsics)


class UserEntry(BaseModel):
    id: str
    files: List[str]
    n_events: int
    left_handed: bool = False
    behaviour_scale: float = 1.0


class CorpusManifest(BaseModel):
    users: List[UserEntry]
    scenario_file: str
    seed: int
    events_per_user: int = 0
    ref_types: List[str] = []


# ---------------------------------------------------------------------------
# event files
# ---------------------------------------------------------------------------

def event_lines(event: ReferenceEvent) -> List[str]:
    lines = [json.dumps({"header": event.header.model_dump()}, sort_keys=True)]
    lines.extend(frame.model_dump_json() for frame in event.stream.frames())
    return lines


def write_events(path: str, events: Sequence[ReferenceEvent]) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise IoError(f"output directory does not exist: {parent}")
    with open(path, "w") as f:
        for event in events:
            f.write("\n".join(event_lines(event)))
            f.write("\n")
    return path


def read_events(path: str) -> List[ReferenceEvent]:
    if not os.path.exists(path):
        raise IoError(f"event file not found: {path}")
    events = []
    header, frames = None, []

    def flush(lineno):
        if header is None:
            return
        if len(frames) != header.n_frames:
            raise FormatError(f"{path}:{lineno}: event {header.event_id} has {len(frames)} frames, "
                              f"header says {header.n_frames}")
        events.append(ReferenceEvent(header=header, stream=FrameStream.from_frames(frames, header.rate)))

    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                if "header" in record:
                    flush(lineno)
                    header, frames = EventHeader(**record["header"]), []
                elif header is None:
                    raise FormatError(f"{path}:{lineno}: frame before any event header")
                else:
                    frames.append(ModalityFrame(**record))
            except (json.JSONDecodeError, ValidationError) as e:
                raise FormatError(f"{path}:{lineno}: {e}")
    try:
        flush("EOF")
    except ValidationError as e:
        raise FormatError(f"{path}: last event is malformed: {e}")
    return events


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(out_dir: str, manifest: CorpusManifest) -> str:
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(manifest.model_dump(), f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def load_manifest(corpus_dir: str) -> CorpusManifest:
    path = os.path.join(corpus_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise CorpusError(f"no {MANIFEST_NAME} in {corpus_dir}")
    try:
        with open(path, "r") as f:
            return CorpusManifest(**json.load(f))
    except (json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"manifest {path} is malformed: {e}")


def load_corpus(corpus_dir: str, jobs: int = 1) -> Tuple[CorpusManifest, List[ReferenceEvent]]:
    manifest = load_manifest(corpus_dir)
    files = [os.path.join(corpus_dir, name) for user in manifest.users for name in user.files]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        per_file = list(pool.map(read_events, files))
    events = [e for chunk in per_file for e in chunk]
    expected = sum(u.n_events for u in manifest.users)
    if len(events) != expected:
        raise CorpusError(f"corpus {corpus_dir} lists {expected} events but files hold {len(events)}")
    logger.info(f"✅ Loaded {len(events)} events for {len(manifest.users)} users from {corpus_dir}")
    return manifest, events


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

META_COLUMNS = ["event_id", "user_id", "pose_id", "roi_id", "target_id", "ref_type",
                "category", "left_hand"]


class Dataset:
    """
    Assembled network inputs.

    X: (N, 36, 6, 3) car-frame window tensors
    Y: (N, 3) unit ground-truth vectors
    meta: one row per sample (META_COLUMNS)
    """

    def __init__(self, X: np.ndarray, Y: np.ndarray, meta: pd.DataFrame, summary: Optional[Dict] = None):
        if len(X) != len(Y) or len(X) != len(meta):
            raise CorpusError("dataset arrays and metadata disagree in length")
        self.X = X
        self.Y = Y
        self.meta = meta.reset_index(drop=True)
        self.summary = summary or {}

    def __len__(self):
        return len(self.X)

    @property
    def user_ids(self) -> List[str]:
        return sorted(self.meta["user_id"].unique())

    @property
    def pose_ids(self) -> List[int]:
        return sorted(int(p) for p in self.meta["pose_id"].unique())

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.X[mask], self.Y[mask], self.meta.iloc[mask], self.summary)

    def filter(self, pose_ids=None, ref_type: Optional[str] = None, users=None) -> "Dataset":
        mask = np.ones(len(self), dtype=bool)
        if pose_ids is not None:
            mask &= self.meta["pose_id"].isin(list(pose_ids)).to_numpy()
        if ref_type is not None:
            mask &= (self.meta["ref_type"] == ref_type).to_numpy()
        if users is not None:
            mask &= self.meta["user_id"].isin(list(users)).to_numpy()
        return self.subset(mask)

    def require(self, what: str) -> "Dataset":
        if len(self) == 0:
            raise EmptyFilterError(f"no samples left after filtering {what}")
        return self

    def samples_meta(self, i: int) -> SampleMeta:
        row = self.meta.iloc[i]
        return SampleMeta(user_id=row.user_id, pose_id=int(row.pose_id), roi_id=int(row.roi_id),
                          ref_type=row.ref_type, event_id=row.event_id, left_hand=bool(row.left_hand))


def prepare_event(event: ReferenceEvent):
    """Sensor stream -> car frame -> filled gaps -> (36, 6, 3) window."""
    car = transform_stream(event.stream, event.extrinsics)
    filled = interpolate_gaps(car)
    return extract_window(filled, event.header.trigger_ts).values


def occlusion_summary(events: Sequence[ReferenceEvent]) -> pd.DataFrame:
    """Share of untracked frames per pose and modality."""
    rows = []
    for event in events:
        missing = event.stream.states == FrameState.MISSING
        row = {"pose_id": event.header.pose_id}
        row.update({m: float(missing[:, j].mean()) for j, m in enumerate(MODALITY_ORDER)})
        rows.append(row)
    if not rows:
        return pd.DataFrame(columns=["pose_id", *MODALITY_ORDER])
    return pd.DataFrame(rows).groupby("pose_id").mean().reset_index()


def build_dataset(events: Sequence[ReferenceEvent], jobs: int = 1) -> Dataset:
    """Assemble tensors; events that cannot be windowed are skipped with a warning."""
    if not events:
        raise CorpusError("no events to assemble")

    def attempt(event):
        try:
            return prepare_event(event), None
        except DataError as e:
            return None, e

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(attempt, events))

    xs, ys, rows, skipped = [], [], [], []
    for event, (x, err) in zip(events, results):
        h = event.header
        if err is not None:
            logger.warning(f"⚠️ Skipping event {h.event_id}: {type(err).__name__}: {err}")
            skipped.append(h.event_id)
            continue
        xs.append(x)
        ys.append(h.label)
        rows.append({"event_id": h.event_id, "user_id": h.user_id, "pose_id": h.pose_id,
                     "roi_id": h.roi_id, "target_id": h.target_id, "ref_type": h.ref_type,
                     "category": h.category, "left_hand": h.left_hand})
    if not xs:
        raise CorpusError(f"all {len(events)} events were skipped")

    meta = pd.DataFrame(rows, columns=META_COLUMNS)
    summary = {
        "n_events": len(events),
        "n_samples": len(xs),
        "skipped": skipped,
        "per_pose": {f"{r}/pose{p}": int(n) for (r, p), n in meta.groupby(["ref_type", "pose_id"]).size().items()},
        "occlusion": occlusion_summary(events).to_dict(orient="records"),
    }
    logger.info(f"📊 Dataset: {len(xs)} samples from {len(events)} events ({len(skipped)} skipped)")
    return Dataset(np.stack(xs), np.asarray(ys, dtype=np.float64), meta, summary)


def load_dataset(corpus_dir: str, jobs: int = 1) -> Tuple[CorpusManifest, Dataset]:
    manifest, events = load_corpus(corpus_dir, jobs)
    return manifest, build_dataset(events, jobs)
