import math

import numpy as np
import pandas as pd
import pytest

from .config import EvalConfig, NetworkConfig, TrainConfig
from .corpus import build_dataset
from .errors import EmptyFilterError, EmptyInputError, IoError, ShapeMismatchError, TooFewUsersError, ZeroVectorError
from .evaluation import (
    REPORT_COLUMNS,
    EvalReport,
    ReportRow,
    accuracy,
    aggregate_folds,
    evaluate_model,
    linear_fit,
    mad_metric,
    make_kfold_splits,
    modality_label,
    per_user_report,
    run_ablation,
    score_predictions,
    subset_network,
    top2_accuracy,
    write_report,
)
from .fusion import mad_loss, weight_init
from .matching import rank_rois
from .synth import (
    DriverProfile,
    OcclusionModel,
    build_default_scenario,
    calibrate_profiles,
    generate_corpus,
    generate_event,
)

TINY_NET = NetworkConfig(feature_maps=2, branch_layers=1, joint_layers=1)
TINY_TRAIN = TrainConfig(epochs=1, batch_size=16, dtype="float64", seed=0)


@pytest.fixture(scope="module")
def scenario():
    return build_default_scenario()


@pytest.fixture(scope="module")
def dataset(scenario):
    """Three users; volume events at poses 1, 2, 4 and point events at poses 1, 2, 4."""
    plan = [(p, "volume", t) for p in (1, 2) for t in range(5)] + [(4, "volume", t) for t in range(3)]
    plan += [(p, "point", t) for p in (1, 2, 4) for t in (0, 1)]
    events = []
    for u in range(3):
        for e, (pose_id, ref_type, target) in enumerate(plan):
            events.append(generate_event(scenario, pose_id, target, ref_type, DriverProfile(), OcclusionModel.none(),
                                         seed=[17, u, e], user_id=f"user_{u:02d}", event_id=f"user_{u:02d}_e{e}"))
    return build_dataset(events)


def _angle_pair(deg):
    a = math.radians(deg)
    return [math.cos(a), math.sin(a), 0.0]


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert accuracy([0, 0], [1, 2]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 75.0
    with pytest.raises(EmptyInputError):
        accuracy([], [])
    with pytest.raises(ShapeMismatchError):
        accuracy([1], [1, 2])


def test_top2_accuracy_examples():
    assert top2_accuracy([[3, 1, 2], [0, 2, 1]], [1, 2]) == 100.0
    assert top2_accuracy([[5]], [5]) == accuracy([5], [5])
    rankings = [[0, 1, 2], [2, 1, 0], [1, 0, 2]]
    truth = [0, 0, 2]
    assert top2_accuracy(rankings, truth) >= accuracy([r[0] for r in rankings], truth)
    with pytest.raises(EmptyInputError):
        top2_accuracy([], [])


def test_top2_accuracy_of_random_rankings():
    rng = np.random.default_rng(0)
    rankings = [list(rng.permutation(5)) for _ in range(10000)]
    truth = rng.integers(0, 5, 10000)
    assert top2_accuracy(rankings, truth) == pytest.approx(40.0, abs=2.0)


def test_mad_metric_examples():
    assert mad_metric([[1.0, 0.0, 0.0]], [[3.0, 0.0, 0.0]]) == (0.0, 0.0)
    preds = [_angle_pair(10), _angle_pair(20), _angle_pair(-10), _angle_pair(-20)]
    truth = [[1.0, 0.0, 0.0]] * 4
    mad, std = mad_metric(preds, truth)
    assert mad == pytest.approx(15.0) and std == pytest.approx(5.0)
    with pytest.raises(ZeroVectorError):
        mad_metric([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])


def test_mad_metric_agrees_with_training_loss():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(50, 3))
    truth = rng.normal(size=(50, 3))
    truth /= np.linalg.norm(truth, axis=1, keepdims=True)
    assert mad_metric(pred, truth)[0] == pytest.approx(math.degrees(mad_loss(pred, truth)), abs=1e-9)
    # order of samples does not matter
    perm = rng.permutation(50)
    assert mad_metric(pred[perm], truth[perm]) == pytest.approx(mad_metric(pred, truth))


def test_kfold_splits_for_28_users():
    users = [f"user_{i:02d}" for i in range(28)]
    plan = make_kfold_splits(users, 5, seed=3)
    assert sorted(len(f.test) for f in plan.folds) == [5, 5, 6, 6, 6]
    assert sorted(u for f in plan.folds for u in f.test) == users
    for fold in plan.folds:
        assert not set(fold.test) & set(fold.train)
        assert not set(fold.test) & set(fold.val)
        assert not set(fold.val) & set(fold.train)
        assert sorted(fold.train + fold.val + fold.test) == users
        assert len(fold.val) in (5, 6)
    assert make_kfold_splits(users, 5, seed=3) == plan
    assert make_kfold_splits(users, 5, seed=4) != plan


def test_kfold_leave_one_out_and_limits():
    users = ["a", "b", "c", "d"]
    plan = make_kfold_splits(users, 4, seed=0)
    assert sorted(f.test[0] for f in plan.folds) == users
    assert all(len(f.test) == 1 and len(f.val) == 1 and len(f.train) == 2 for f in plan.folds)
    pair = make_kfold_splits(["a", "b"], 2, seed=0)
    assert all(f.val == [] and len(f.train) == 1 for f in pair.folds)
    with pytest.raises(TooFewUsersError):
        make_kfold_splits(users, 1, seed=0)
    with pytest.raises(TooFewUsersError):
        make_kfold_splits(users, 5, seed=0)


def test_linear_fit_cases():
    line = linear_fit([1.0, 2.0, 3.0, 4.0], [10.0, 8.0, 6.0, 4.0], pose="1")
    assert line.slope == pytest.approx(-2.0) and line.intercept == pytest.approx(12.0)
    assert line.r2 == pytest.approx(1.0) and line.n == 4 and line.pose == "1"

    flat = linear_fit([5.0, 9.0, 12.0], [70.0, 70.0, 70.0])
    assert flat.slope == pytest.approx(0.0, abs=1e-9) and flat.r2 == 1.0
    same_x = linear_fit([3.0, 3.0], [1.0, 2.0])
    assert same_x.slope == 0.0 and same_x.intercept == 1.5

    rng = np.random.default_rng(2)
    x, y = rng.uniform(5, 40, 28), rng.uniform(30, 100, 28)
    fit = linear_fit(x, y)
    n = len(x)
    slope = (n * np.sum(x * y) - x.sum() * y.sum()) / (n * np.sum(x * x) - x.sum() ** 2)
    intercept = (y.sum() - slope * x.sum()) / n
    assert fit.slope == pytest.approx(slope) and fit.intercept == pytest.approx(intercept)
    assert fit.r2 == pytest.approx(np.corrcoef(x, y)[0, 1] ** 2)

    with pytest.raises(TooFewUsersError):
        linear_fit([1.0], [2.0])
    with pytest.raises(ShapeMismatchError):
        linear_fit([1.0, 2.0], [2.0])


def test_score_predictions_matches_manual_matching(scenario, dataset):
    part = dataset.filter(ref_type="volume", pose_ids=[1])
    rng = np.random.default_rng(3)
    preds = part.Y + rng.normal(0.0, 0.2, part.Y.shape)
    metrics = score_predictions(preds, part, scenario)
    rankings = [rank_rois(p, scenario.roi_map(), scenario.pose(1).transform) for p in preds]
    truth = part.meta["roi_id"].tolist()
    assert metrics["n_events"] == len(part)
    assert metrics["acc"] == accuracy([r[0] for r in rankings], truth)
    assert metrics["top2"] == top2_accuracy(rankings, truth)
    assert metrics["top2"] >= metrics["acc"]
    perfect = score_predictions(part.Y, part, scenario)
    assert perfect["mad_deg"] == pytest.approx(0.0, abs=1e-5)


def test_collapsed_predictions_score_as_misses(scenario, dataset):
    part = dataset.filter(ref_type="volume", pose_ids=[1])
    preds = part.Y.copy()
    preds[0] = 0.0
    metrics = score_predictions(preds, part, scenario)
    intact = score_predictions(part.Y[1:], part.subset(np.arange(1, len(part))), scenario)
    n = len(part)
    assert metrics["mad_deg"] == pytest.approx((90.0 + intact["mad_deg"] * (n - 1)) / n, abs=1e-6)
    assert metrics["acc"] == pytest.approx(intact["acc"] * (n - 1) / n)
    assert metrics["top2"] == pytest.approx(intact["top2"] * (n - 1) / n)


def test_subset_network_and_labels():
    gaze = subset_network(TINY_NET, "gaze")
    assert gaze.modalities == ("eye",) and modality_label(gaze) == "gaze"
    assert modality_label(TINY_NET) == "fusion"
    assert modality_label(TINY_NET.model_copy(update={"modalities": ("finger", "head")})) == "finger+head"
    with pytest.raises(EmptyFilterError):
        subset_network(TINY_NET, "voice")


def test_aggregate_folds_mean_and_pooled(scenario, dataset):
    part = dataset.filter(ref_type="volume", pose_ids=[1])
    first = part.filter(users=["user_00"])
    rest = part.filter(users=["user_01", "user_02"])
    results = [(first.Y, first), (-rest.Y, rest)]
    mean = aggregate_folds(results, scenario, "direction_box", pooled=False)
    pooled = aggregate_folds(results, scenario, "direction_box", pooled=True)
    assert mean["mad_deg"] == pytest.approx(90.0, abs=1e-4)
    assert pooled["mad_deg"] == pytest.approx(120.0, abs=1e-4)
    assert mean["n_events"] == pooled["n_events"] == len(part)
    with pytest.raises(EmptyFilterError):
        aggregate_folds([None], scenario, "direction_box", pooled=False)


def test_ablation_rows_and_far_pose_exclusion(scenario, dataset):
    eval_cfg = EvalConfig(k_folds=3, jobs=2)
    volume = run_ablation(dataset, scenario, "volume", TINY_NET, TINY_TRAIN, eval_cfg, subsets=("fusion", "gaze"))
    frame = volume.to_frame()
    assert list(frame.columns) == REPORT_COLUMNS
    assert len(frame) == 2 * (3 + 1)
    assert set(frame["pose"]) == {"1", "2", "4", "all"}
    for _, row in frame.iterrows():
        assert 0.0 <= row.acc <= row.top2 <= 100.0 and row.mad_deg >= 0.0
    fusion = frame[frame["modality"] == "fusion"].set_index("pose")
    assert fusion.loc["all", "n_events"] == fusion.loc[["1", "2", "4"], "n_events"].sum()

    point = run_ablation(dataset, scenario, "point", TINY_NET, TINY_TRAIN, eval_cfg, subsets=("fusion",))
    assert set(point.to_frame()["pose"]) == {"1", "2", "all"}
    assert point.rows[-1].n_events == 3 * 4

    with pytest.raises(EmptyFilterError):
        run_ablation(dataset, scenario, "point", TINY_NET, TINY_TRAIN, eval_cfg, poses=[4])
    with pytest.raises(TooFewUsersError):
        run_ablation(dataset, scenario, "volume", TINY_NET, TINY_TRAIN, EvalConfig(k_folds=4), subsets=("head",))


def test_evaluate_model_rows(scenario, dataset):
    model = weight_init(NetworkConfig(feature_maps=8, branch_layers=1, joint_layers=1), 0)
    report = evaluate_model(model, dataset, scenario)
    frame = report.to_frame()
    assert set(zip(frame["ref_type"], frame["pose"])) == {
        ("volume", "1"), ("volume", "2"), ("volume", "4"), ("point", "1"), ("point", "2"), ("point", "4")}
    assert set(frame["modality"]) == {"fusion"}
    assert frame["n_events"].sum() == len(dataset)


def test_per_user_report(scenario, dataset):
    report = per_user_report(dataset, scenario, TINY_NET, TINY_TRAIN, EvalConfig(), ref_type="volume")
    users = report.users_frame()
    assert sorted(users["user_id"].unique()) == ["user_00", "user_01", "user_02"]
    assert len(users) == 3 * 3
    assert sorted(f.pose for f in report.fits) == ["1", "2", "4"]
    assert all(f.n == 3 for f in report.fits)
    with pytest.raises(TooFewUsersError):
        per_user_report(dataset.filter(users=["user_00"]), scenario, TINY_NET, TINY_TRAIN, EvalConfig())


def test_leave_one_out_with_two_users_selects_on_training_users(scenario, dataset):
    pair = dataset.filter(users=["user_00", "user_01"])
    report = per_user_report(pair, scenario, TINY_NET, TINY_TRAIN, EvalConfig(), ref_type="point")
    assert sorted(report.users_frame()["user_id"].unique()) == ["user_00", "user_01"]


def test_report_output(tmp_path):
    rows = [ReportRow(ref_type="volume", pose=p, modality=m, n_events=10, acc=80.0, top2=90.0,
                      mad_deg=12.3, stdad_deg=4.5) for p in ("1", "all") for m in ("fusion", "head")]
    report = EvalReport(rows=rows).merge(EvalReport(rows=rows[:1]))
    text = EvalReport(rows=rows).to_text()
    assert "[volume]" in text and "all poses" in text and "pose 1" in text
    assert text.index("head") < text.index("fusion")
    assert len(report.rows) == 5

    written = write_report(EvalReport(rows=rows), str(tmp_path / "report.csv"))
    assert written["report"].endswith("report.csv") and written["table"].endswith("report.txt")
    frame = pd.read_csv(written["report"], dtype={"pose": str})
    assert list(frame.columns) == REPORT_COLUMNS and len(frame) == 4
    assert "users" not in written
    with pytest.raises(IoError):
        write_report(EvalReport(rows=rows), str(tmp_path / "missing" / "r.csv"))


@pytest.mark.slow
def test_fusion_beats_single_modalities_on_low_noise_corpus(scenario):
    profiles = {pid: p.scaled(0.5) for pid, p in calibrate_profiles().items()}
    profiles["all"] = calibrate_profiles("all").scaled(0.5)
    _, events = generate_corpus(scenario, 8, 60, seed=1, ref_types=("volume",), profiles=profiles,
                                occ=OcclusionModel.default(), jobs=4)
    data = build_dataset(events, jobs=4)
    net = NetworkConfig(feature_maps=16)
    cfg = TrainConfig(epochs=15, batch_size=32, dtype="float32", seed=1)
    report = run_ablation(data, scenario, "volume", net, cfg, EvalConfig(k_folds=5, jobs=4), poses=[1],
                          include_all=False)
    rows = {r.modality: r for r in report.rows}
    best_single = max(rows[m].acc for m in ("head", "gaze", "finger"))
    assert rows["fusion"].acc >= best_single
    assert rows["fusion"].mad_deg <= min(rows[m].mad_deg for m in ("head", "gaze", "finger")) + 0.5


@pytest.mark.slow
def test_fusion_leads_the_ablation_at_calibrated_noise(scenario):
    # default profiles follow the tabulated per-pose noise, with occlusion dropout
    _, events = generate_corpus(scenario, 8, 60, seed=1, ref_types=("volume",),
                                occ=OcclusionModel.default(), jobs=4)
    data = build_dataset(events, jobs=4)
    net = NetworkConfig(feature_maps=16)
    cfg = TrainConfig(epochs=20, batch_size=32, dtype="float32", seed=1)
    report = run_ablation(data, scenario, "volume", net, cfg, EvalConfig(k_folds=5, jobs=4), poses=None,
                          include_all=True)
    assert {r.pose for r in report.rows} >= {"1", "all"}
    for pose in ("1", "all"):
        rows = {r.modality: r for r in report.rows if r.pose == pose}
        singles = [rows[m] for m in ("head", "gaze", "finger")]
        assert rows["fusion"].acc >= max(r.acc for r in singles)
        assert rows["fusion"].mad_deg <= min(r.mad_deg for r in singles) + 0.5
    assert all(r.top2 >= r.acc for r in report.rows)
