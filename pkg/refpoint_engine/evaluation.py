"""
Evaluation protocol: metrics, user-based k-fold splits, modality ablations and
the leave-one-out per-user analysis.

Every fold trains its own model; test-fold users are passed to the trainer as
forbidden so a leak aborts the run instead of inflating the numbers.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .config import MODALITIES, EvalConfig, NetworkConfig, TrainConfig
from .corpus import Dataset
from .errors import (
    EmptyFilterError,
    EmptyInputError,
    IoError,
    ShapeMismatchError,
    TooFewUsersError,
    ZeroVectorError,
)
from .fusion import FusionModel, train, train_arrays
from .matching import rank_rois
from .scenario import Scenario
from .synth import is_far_pose

logger = logging.getLogger(__name__)

MODALITY_SUBSETS = {
    "head": ("head",),
    "gaze": ("eye",),
    "finger": ("finger",),
    "fusion": MODALITIES,
}
ALL_POSES = "all"
REPORT_COLUMNS = ["ref_type", "pose", "modality", "n_events", "acc", "top2", "mad_deg", "stdad_deg"]
USER_COLUMNS = ["user_id", "ref_type", "pose", "n_events", "acc", "top2", "mad_deg", "stdad_deg"]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(preds: Sequence[int], truth: Sequence[int]) -> float:
    """Accuracy = TP / N * 100."""
    preds, truth = np.asarray(preds), np.asarray(truth)
    if len(preds) != len(truth):
        raise ShapeMismatchError(f"{len(preds)} predictions for {len(truth)} labels")
    if len(truth) == 0:
        raise EmptyInputError("accuracy of an empty set")
    return float(100.0 * np.mean(preds == truth))


def top2_accuracy(rankings: Sequence[Sequence[int]], truth: Sequence[int]) -> float:
    if len(rankings) != len(truth):
        raise ShapeMismatchError(f"{len(rankings)} rankings for {len(truth)} labels")
    if len(truth) == 0:
        raise EmptyInputError("top-2 accuracy of an empty set")
    hits = [t in list(r)[:2] for r, t in zip(rankings, truth)]
    return float(100.0 * np.mean(hits))


def angular_errors(pred_vectors, truth_vectors) -> np.ndarray:
    """Per-sample angle in radians."""
    p = np.asarray(pred_vectors, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(truth_vectors, dtype=np.float64).reshape(-1, 3)
    if len(p) != len(y):
        raise ShapeMismatchError(f"{len(p)} predictions for {len(y)} truths")
    if len(p) == 0:
        raise EmptyInputError("angular error of an empty set")
    pn = np.linalg.norm(p, axis=1)
    yn = np.linalg.norm(y, axis=1)
    if np.any(pn < 1e-12) or np.any(yn < 1e-12):
        raise ZeroVectorError("angular error needs nonzero vectors")
    return np.arccos(np.clip(np.sum(p * y, axis=1) / (pn * yn), -1.0, 1.0))


def mad_metric(pred_vectors, truth_vectors) -> Tuple[float, float]:
    """(MAD, Std.AD) in degrees; Std.AD divides by N."""
    angles = np.degrees(angular_errors(pred_vectors, truth_vectors))
    return float(angles.mean()), float(angles.std())


def score_predictions(preds: np.ndarray, dataset: Dataset, scenario: Scenario,
                      method: str = "direction_box") -> Dict[str, float]:
    """
    Match every prediction against all ROIs from its car pose and compute the report metrics.

    A prediction that collapsed to the zero vector matches nothing and counts as 90°.
    """
    if len(dataset) == 0:
        raise EmptyInputError("no samples to score")
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 3)
    if len(preds) != len(dataset):
        raise ShapeMismatchError(f"{len(preds)} predictions for {len(dataset)} samples")
    dead = np.linalg.norm(preds, axis=1) < 1e-12
    if dead.any():
        logger.warning(f"⚠️ {int(dead.sum())} of {len(preds)} predictions collapsed to zero; scored as misses")
    rois = scenario.roi_map()
    poses = [scenario.pose(int(p)).transform for p in dataset.meta["pose_id"]]
    rankings = [[] if d else rank_rois(v, rois, t, method) for v, t, d in zip(preds, poses, dead)]
    truth = dataset.meta["roi_id"].astype(int).tolist()
    angles = np.full(len(preds), 90.0)
    if not dead.all():
        angles[~dead] = np.degrees(angular_errors(preds[~dead], dataset.Y[~dead]))
    return {
        "n_events": len(dataset),
        "acc": accuracy([r[0] if r else -1 for r in rankings], truth),
        "top2": top2_accuracy(rankings, truth),
        "mad_deg": float(angles.mean()),
        "stdad_deg": float(angles.std()),
    }


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

class FoldSplit(BaseModel):
    train: List[str]
    val: List[str]
    test: List[str]


class SplitPlan(BaseModel):
    k: int
    seed: int
    folds: List[FoldSplit]

    def check_disjoint(self):
        for i, fold in enumerate(self.folds):
            if set(fold.test) & (set(fold.train) | set(fold.val)):
                raise TooFewUsersError(f"fold {i} reuses a test user for training")


def make_kfold_splits(user_ids: Sequence[str], k: int, seed: int) -> SplitPlan:
    """
    Seeded user shuffle cut into k contiguous test folds. Each fold's
    validation users are the next fold-worth of users after the test fold in
    shuffled order; the validation set may be empty only when a single user
    remains outside the test fold.
    """
    users = sorted(set(user_ids))
    if k < 2:
        raise TooFewUsersError(f"k must be >= 2, got {k}")
    if len(users) < k:
        raise TooFewUsersError(f"{len(users)} users cannot fill {k} folds")
    order = [users[i] for i in np.random.default_rng(seed).permutation(len(users))]
    chunks = [list(c) for c in np.array_split(np.asarray(order, dtype=object), k)]
    folds = []
    for i, test in enumerate(chunks):
        remainder = [u for j in list(range(i + 1, k)) + list(range(i)) for u in chunks[j]]
        n_val = min(len(chunks[(i + 1) % k]), len(remainder) - 1)
        folds.append(FoldSplit(train=sorted(remainder[n_val:]), val=sorted(remainder[:n_val]),
                               test=sorted(test)))
    plan = SplitPlan(k=k, seed=seed, folds=folds)
    plan.check_disjoint()
    return plan


# ---------------------------------------------------------------------------
# fold runs
# ---------------------------------------------------------------------------

def subset_network(net_cfg: NetworkConfig, subset: str) -> NetworkConfig:
    if subset not in MODALITY_SUBSETS:
        raise EmptyFilterError(f"unknown modality subset {subset!r}; choose from {list(MODALITY_SUBSETS)}")
    return net_cfg.model_copy(update={"modalities": MODALITY_SUBSETS[subset]})


def modality_label(net_cfg: NetworkConfig) -> str:
    for label, mods in MODALITY_SUBSETS.items():
        if tuple(net_cfg.modalities) == tuple(mods):
            return label
    return "+".join(net_cfg.modalities)


def train_fold(dataset: Dataset, fold: FoldSplit, net_cfg: NetworkConfig,
               train_cfg: TrainConfig) -> FusionModel:
    """Train on one fold's train users; the test users are forbidden in every batch."""
    train_set = dataset.filter(users=fold.train).require(f"train users of fold {fold.test}")
    if fold.val:
        val_set = dataset.filter(users=fold.val).require(f"validation users {fold.val}")
        model, _, _ = train(train_set, val_set, net_cfg, train_cfg, forbidden_users=fold.test)
    else:
        logger.warning(f"⚠️ No validation users left for test fold {fold.test}; selecting on training users")
        model, _, _ = train_arrays(train_set.X, train_set.Y, train_set.X, train_set.Y, net_cfg, train_cfg,
                                   batch_users=train_set.meta["user_id"].to_numpy(),
                                   forbidden_users=fold.test)
    return model


def _fold_job(dataset: Dataset, fold: FoldSplit, net_cfg: NetworkConfig, train_cfg: TrainConfig):
    test_set = dataset.filter(users=fold.test)
    if len(test_set) == 0:
        return None
    model = train_fold(dataset, fold, net_cfg, train_cfg)
    preds = model.predict(test_set.X)
    return preds, test_set


def aggregate_folds(fold_results: List[Tuple[np.ndarray, Dataset]], scenario: Scenario,
                    method: str, pooled: bool) -> Dict[str, float]:
    """Unweighted mean over folds, or per-event pooling when `pooled` is set."""
    fold_results = [r for r in fold_results if r is not None]
    if not fold_results:
        raise EmptyFilterError("no fold produced test predictions")
    if pooled:
        preds = np.concatenate([p for p, _ in fold_results])
        merged = Dataset(np.concatenate([d.X for _, d in fold_results]),
                         np.concatenate([d.Y for _, d in fold_results]),
                         pd.concat([d.meta for _, d in fold_results], ignore_index=True))
        return score_predictions(preds, merged, scenario, method)
    per_fold = [score_predictions(p, d, scenario, method) for p, d in fold_results]
    out = {key: float(np.mean([m[key] for m in per_fold])) for key in ("acc", "top2", "mad_deg", "stdad_deg")}
    out["n_events"] = int(sum(m["n_events"] for m in per_fold))
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

class ReportRow(BaseModel):
    ref_type: str
    pose: str
    modality: str
    n_events: int
    acc: float
    top2: float
    mad_deg: float
    stdad_deg: float


class UserRow(BaseModel):
    user_id: str
    ref_type: str
    pose: str
    n_events: int
    acc: float
    top2: float
    mad_deg: float
    stdad_deg: float


class LinearFit(BaseModel):
    pose: str
    slope: float
    intercept: float
    r2: float
    n: int


class EvalReport(BaseModel):
    rows: List[ReportRow] = []
    user_rows: List[UserRow] = []
    fits: List[LinearFit] = []

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows], columns=REPORT_COLUMNS)

    def users_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.user_rows], columns=USER_COLUMNS)

    def fits_frame(self) -> pd.DataFrame:
        return pd.DataFrame([f.model_dump() for f in self.fits], columns=["pose", "slope", "intercept", "r2", "n"])

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(rows=self.rows + other.rows, user_rows=self.user_rows + other.user_rows,
                          fits=self.fits + other.fits)

    def to_text(self) -> str:
        """Poses down, modalities across, each cell `acc / top2 / MAD (Std.AD)`."""
        if not self.rows:
            return "(empty report)"
        df = self.to_frame()
        df["cell"] = df.apply(lambda r: f"{r.acc:5.1f} / {r.top2:5.1f} / {r.mad_deg:5.1f} ({r.stdad_deg:4.1f})",
                              axis=1)
        order = [m for m in MODALITY_SUBSETS if m in set(df["modality"])]
        order += sorted(set(df["modality"]) - set(order))
        blocks = []
        for ref_type, part in df.groupby("ref_type", sort=False):
            table = part.pivot(index="pose", columns="modality", values="cell").reindex(columns=order)
            table = table.reindex(sorted(table.index, key=lambda p: (p == ALL_POSES, p)))
            table.index = [f"pose {p}" if p != ALL_POSES else "all poses" for p in table.index]
            blocks.append(f"[{ref_type}] Acc / Top-2 Acc / MAD (Std.AD)\n{table.fillna('-').to_string()}")
        return "\n\n".join(blocks)


def write_report(report: EvalReport, out_path: str) -> Dict[str, str]:
    """Write `<out>.csv`, `<out>.txt` and, when present, the per-user and fit CSVs."""
    base = out_path[:-4] if out_path.endswith(".csv") else out_path
    parent = os.path.dirname(os.path.abspath(base))
    if not os.path.isdir(parent):
        raise IoError(f"report directory does not exist: {parent}")
    written = {"report": f"{base}.csv", "table": f"{base}.txt"}
    report.to_frame().to_csv(written["report"], index=False, float_format="%.4f")
    with open(written["table"], "w") as f:
        f.write(report.to_text() + "\n")
    if report.user_rows:
        written["users"] = f"{base}_users.csv"
        report.users_frame().to_csv(written["users"], index=False, float_format="%.4f")
    if report.fits:
        written["fits"] = f"{base}_fits.csv"
        report.fits_frame().to_csv(written["fits"], index=False, float_format="%.6f")
    logger.info(f"💾 Report written: {', '.join(written.values())}")
    return written


def evaluate_model(model: FusionModel, dataset: Dataset, scenario: Scenario,
                   method: str = "direction_box") -> EvalReport:
    """One row per (ref_type, pose) for an already trained model."""
    dataset.require("for evaluation")
    preds = model.predict(dataset.X)
    label = modality_label(model.config)
    rows = []
    for ref_type in sorted(dataset.meta["ref_type"].unique()):
        for pose in sorted(dataset.meta.loc[dataset.meta["ref_type"] == ref_type, "pose_id"].unique()):
            mask = ((dataset.meta["ref_type"] == ref_type) & (dataset.meta["pose_id"] == pose)).to_numpy()
            metrics = score_predictions(preds[mask], dataset.subset(mask), scenario, method)
            rows.append(ReportRow(ref_type=ref_type, pose=str(int(pose)), modality=label, **metrics))
    return EvalReport(rows=rows)


def _settings(dataset: Dataset, scenario: Scenario, ref_type: str, subsets: Sequence[str],
              poses: Optional[Sequence[int]], include_all: bool):
    subset = dataset.filter(ref_type=ref_type).require(f"ref_type={ref_type}")
    present = subset.pose_ids if poses is None else [p for p in poses if p in subset.pose_ids]
    if ref_type == "point":
        present = [p for p in present if not is_far_pose(scenario, p)]
    if not present:
        raise EmptyFilterError(f"no car poses left for {ref_type} events")
    pose_filters = [(str(p), [p]) for p in present]
    if include_all:
        pose_filters.append((ALL_POSES, present))
    return subset, [(s, label, ids) for s in subsets for label, ids in pose_filters]


def run_ablation(dataset: Dataset, scenario: Scenario, ref_type: str,
                 net_cfg: NetworkConfig, train_cfg: TrainConfig, eval_cfg: EvalConfig,
                 subsets: Sequence[str] = tuple(MODALITY_SUBSETS), poses: Optional[Sequence[int]] = None,
                 include_all: bool = True, seed: Optional[int] = None) -> EvalReport:
    """
    A fresh model per (modality subset x pose filter x fold).

    The "all" pose rows train one common model on every pose present.
    Point events never include the far pose.
    """
    seed = train_cfg.seed if seed is None else seed
    data, settings = _settings(dataset, scenario, ref_type, subsets, poses, include_all)
    jobs = []
    for subset, label, pose_ids in settings:
        part = data.filter(pose_ids=pose_ids).require(f"{ref_type} poses {pose_ids}")
        plan = make_kfold_splits(part.user_ids, eval_cfg.k_folds, seed)
        cfg = subset_network(net_cfg, subset)
        jobs.extend(((subset, label), part, fold, cfg) for fold in plan.folds)

    logger.info(f"🔄 Ablation [{ref_type}]: {len(settings)} settings, {len(jobs)} fold models, jobs={eval_cfg.jobs}")
    with ThreadPoolExecutor(max_workers=max(1, eval_cfg.jobs)) as pool:
        results = list(pool.map(
            lambda job: _fold_job(job[1], job[2], job[3], train_cfg), jobs))

    rows = []
    for subset, label, _ in settings:
        fold_results = [r for job, r in zip(jobs, results) if job[0] == (subset, label)]
        metrics = aggregate_folds(fold_results, scenario, eval_cfg.match_method, eval_cfg.pooled)
        row = ReportRow(ref_type=ref_type, pose=label, modality=subset, **metrics)
        logger.info(f"📊 {ref_type} pose {label} {subset}: acc {row.acc:.1f}% top2 {row.top2:.1f}% "
                    f"MAD {row.mad_deg:.1f}° ({row.stdad_deg:.1f}°)")
        rows.append(row)
    return EvalReport(rows=rows)


# ---------------------------------------------------------------------------
# per-user analysis
# ---------------------------------------------------------------------------

def linear_fit(x, y, pose: str = ALL_POSES) -> LinearFit:
    """Least-squares y = slope * x + intercept with R^2 (1.0 when y is constant)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ShapeMismatchError(f"{len(x)} x values for {len(y)} y values")
    if len(x) < 2:
        raise TooFewUsersError(f"a regression needs at least 2 users, got {len(x)}")
    if np.ptp(x) == 0:
        slope, intercept = 0.0, float(y.mean())
    else:
        A = np.column_stack([x, np.ones_like(x)])
        (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    residual = y - (slope * x + intercept)
    ss_res = float(residual @ residual)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(pose=pose, slope=float(slope), intercept=float(intercept), r2=r2, n=len(x))


def per_user_report(dataset: Dataset, scenario: Scenario, net_cfg: NetworkConfig,
                    train_cfg: TrainConfig, eval_cfg: EvalConfig,
                    ref_type: Optional[str] = None) -> EvalReport:
    """
    Leave-one-user-out: one common model per held-out user, scored per pose,
    then accuracy regressed on MAD across users for every pose.
    """
    data = dataset.filter(ref_type=ref_type) if ref_type else dataset
    data.require(f"ref_type={ref_type}")
    users = data.user_ids
    if len(users) < 2:
        raise TooFewUsersError(f"leave-one-out needs at least 2 users, got {len(users)}")
    plan = make_kfold_splits(users, len(users), train_cfg.seed)

    logger.info(f"🔄 Leave-one-out over {len(users)} users (jobs={eval_cfg.jobs})")
    with ThreadPoolExecutor(max_workers=max(1, eval_cfg.jobs)) as pool:
        results = list(pool.map(
            lambda fold: _fold_job(data, fold, net_cfg, train_cfg), plan.folds))

    user_rows = []
    for fold, result in zip(plan.folds, results):
        if result is None:
            continue
        preds, test_set = result
        for (rt, pose), idx in test_set.meta.groupby(["ref_type", "pose_id"]).indices.items():
            metrics = score_predictions(preds[idx], test_set.subset(idx), scenario, eval_cfg.match_method)
            user_rows.append(UserRow(user_id=fold.test[0], ref_type=rt, pose=str(int(pose)), **metrics))

    fits = []
    frame = pd.DataFrame([r.model_dump() for r in user_rows], columns=USER_COLUMNS)
    for pose, part in frame.groupby("pose"):
        # one point per user; pool ref types of the same user
        per_user = part.groupby("user_id")[["acc", "mad_deg"]].mean()
        if len(per_user) >= 2:
            fit = linear_fit(per_user["mad_deg"], per_user["acc"], pose=pose)
            fits.append(fit)
            logger.info(f"📊 Pose {pose}: acc = {fit.slope:.3f} * MAD + {fit.intercept:.2f} (R² {fit.r2:.3f})")
        else:
            logger.warning(f"⚠️ Pose {pose} has a single user, no regression")
    return EvalReport(user_rows=user_rows, fits=fits)
