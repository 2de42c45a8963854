import math

import numpy as np
import pytest

from .errors import UsageError, ZeroVectorError
from .geo import RigidTransform
from .matching import RoiMap, clamp_distances, match_roi, rank_batch, rank_rois, ray_box_distances
from .synth import build_default_scenario

IDENT = RigidTransform.identity()


def _box(centre, half):
    c, h = np.asarray(centre, dtype=float), np.asarray(half, dtype=float)
    return np.array([c + h * np.array([sx, sy, sz]) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])


def _map(*boxes, ids=None):
    return RoiMap(ids=list(ids or range(len(boxes))), vertices=np.stack(boxes))


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _corner_direction(box):
    # on the boundary of the box of corner directions
    return box[0] / np.linalg.norm(box[0])


def test_vector_inside_a_box_matches_it_with_zero_distance():
    boxes = [_box([20, 0, 0], [2, 2, 2]), _box([0, 20, 0], [2, 2, 2]), _box([0, -20, 0], [2, 2, 2])]
    rois = _map(*boxes)
    result = match_roi(_corner_direction(boxes[0]), rois, IDENT)
    assert result.roi_id == 0
    assert result.distances[0] == pytest.approx(0.0, abs=1e-12)
    assert result.distances[1] > 0 and result.distances[2] > 0
    assert match_roi(_corner_direction(boxes[2]) * 3.0, rois, IDENT).roi_id == 2
    # x in [18, 22] / sqrt(x^2 + 8) and |y|, |z| <= 2 / sqrt(332) hold for this unit vector
    unit = np.array([math.sqrt(0.98), 0.1, 0.1])
    assert match_roi(unit, rois, IDENT).distances[0] == 0.0


def test_aiming_at_the_box_centre_is_only_nearly_zero_distance():
    rois = _map(_box([20, 0, 0], [2, 2, 2]), _box([0, 20, 0], [2, 2, 2]))
    result = match_roi([1.0, 0.0, 0.0], rois, IDENT)
    # the centre axis pokes out of the box of unit corner directions (max x = 22 / sqrt(492))
    assert result.distances[0] == pytest.approx(1.0 - 22.0 / math.sqrt(492.0), rel=1e-9)
    assert 0.0 < result.distances[0] < 0.01
    assert result.roi_id == 0


def test_overlapping_boxes_tie_break_on_centroid_angle():
    # corner directions span x in [0.33, 0.94] and [0.27, 0.96]; both contain v
    a = np.array([[x, y, z] for x in (5, 40) for y in (-10, 10) for z in (-10, 10)], dtype=float)
    b = np.array([[x, y, z] for x in (5, 40) for y in (-5, 15) for z in (-10, 10)], dtype=float)
    rois = _map(a, b, ids=[7, 3])
    v = [0.8, 0.3, 0.0]
    result = match_roi(v, rois, IDENT)
    assert result.distances[7] == 0.0 and result.distances[3] == 0.0
    # centroid of b is 8 degrees from v, centroid of a 20.6
    assert result.proximity[3] == pytest.approx(math.atan2(0.3, 0.8) - math.atan2(5.0, 22.5))
    assert result.roi_id == 3
    assert result.ranking == [3, 7]


def test_exact_ties_go_to_the_lowest_id():
    box = _box([20, 0, 0], [1, 1, 1])
    rois = _map(box, box.copy(), ids=[9, 4])
    assert rank_rois([1.0, 0.0, 0.0], rois, IDENT) == [4, 9]


def test_clamp_distance_matches_dense_sampling_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        centre = rng.normal(size=3) * 20.0
        box = _box(centre, rng.uniform(0.5, 5.0, 3))
        v = rng.normal(size=3)
        v_hat = v / np.linalg.norm(v)
        got = clamp_distances(v_hat, box[None])[0]

        hat = box / np.linalg.norm(box, axis=1, keepdims=True)
        lo, hi = hat.min(axis=0), hat.max(axis=0)
        grid = np.stack(np.meshgrid(*[np.linspace(lo[k], hi[k], 41) for k in range(3)], indexing="ij"), -1)
        sampled = np.linalg.norm(grid.reshape(-1, 3) - v_hat, axis=1).min()
        assert got <= sampled + 1e-12
        assert sampled - got <= 0.5 * np.linalg.norm((hi - lo) / 40.0) + 1e-12


def test_choice_matches_dense_sampling_oracle_on_five_roi_maps():
    rng = np.random.default_rng(1)
    n_grid = 21
    compared = 0
    for _ in range(200):
        boxes = [_box(rng.normal(size=3) * 25.0, rng.uniform(0.5, 5.0, 3)) for _ in range(5)]
        rois = _map(*boxes)
        v = rng.normal(size=3)
        v_hat = v / np.linalg.norm(v)
        result = match_roi(v, rois, IDENT)

        sampled, slack = [], []
        for box in boxes:
            hat = box / np.linalg.norm(box, axis=1, keepdims=True)
            lo, hi = hat.min(axis=0), hat.max(axis=0)
            axes = [np.linspace(lo[k], hi[k], n_grid) for k in range(3)]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
            sampled.append(np.linalg.norm(grid - v_hat, axis=1).min())
            slack.append(0.5 * np.linalg.norm((hi - lo) / (n_grid - 1)))
        order = np.argsort(sampled)
        if result.distances[result.roi_id] == 0.0 and sorted(result.distances.values())[1] == 0.0:
            # ties go to the closest centroid
            zero = [rid for rid, d in result.distances.items() if d == 0.0]
            assert result.roi_id == min(zero, key=lambda rid: result.proximity[rid])
            continue
        best = order[0]
        if any(sampled[k] - slack[k] <= sampled[best] for k in order[1:]):
            continue
        compared += 1
        assert result.roi_id == int(best)
    assert compared > 100


def test_ranking_orders_by_distance():
    rois = _map(_box([20, 10, 0], [1, 1, 1]), _box([20, 0, 0], [1, 1, 1]), _box([20, 20, 0], [1, 1, 1]))
    result = match_roi([1.0, 0.0, 0.0], rois, IDENT)
    assert result.ranking == [1, 0, 2]
    assert result.distances[1] < result.distances[0] < result.distances[2]
    payload = result.to_dict()
    assert [r["id"] for r in payload["rois"]] == [1, 0, 2]
    assert payload["method"] == "direction_box"


def test_matching_ignores_vector_scale():
    scenario = build_default_scenario()
    rois = scenario.roi_map()
    pose = scenario.pose(1).transform
    rng = np.random.default_rng(4)
    for _ in range(20):
        v = rng.normal(size=3)
        first = rank_rois(v, rois, pose)
        assert rank_rois(v * 1e-6, rois, pose) == first
        assert rank_rois(v * 1e6, rois, pose) == first


def test_matching_ignores_vertex_order_and_roi_order():
    rng = np.random.default_rng(6)
    boxes = [_box(rng.normal(size=3) * 30, rng.uniform(1, 4, 3)) for _ in range(4)]
    rois = _map(*boxes, ids=[10, 11, 12, 13])
    shuffled = _map(*[boxes[i][rng.permutation(8)] for i in (2, 0, 3, 1)], ids=[12, 10, 13, 11])
    for _ in range(20):
        v = rng.normal(size=3)
        assert rank_rois(v, rois, IDENT) == rank_rois(v, shuffled, IDENT)


def test_matching_in_a_rotated_car_frame():
    rng = np.random.default_rng(9)
    pose = RigidTransform(rotation=_random_rotation(rng), translation=rng.normal(size=3) * 1e6)
    car_boxes = [_box([20, 0, 0], [2, 2, 2]), _box([0, 25, 0], [2, 2, 2])]
    world = _map(*[pose.inverse().apply(b) for b in car_boxes])
    assert match_roi([0.1, 1.0, 0.0], world, pose).roi_id == 1
    assert rank_batch(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), world, [pose, pose]) == [[0, 1], [1, 0]]


def test_zero_vector_and_bad_method_are_rejected():
    rois = _map(_box([20, 0, 0], [1, 1, 1]))
    with pytest.raises(ZeroVectorError):
        match_roi([0.0, 0.0, 0.0], rois, IDENT)
    with pytest.raises(ZeroVectorError):
        match_roi([1e-14, 0.0, 0.0], rois, IDENT)
    with pytest.raises(UsageError):
        match_roi([1.0, 0.0, 0.0], rois, IDENT, method="nearest")


def test_roi_map_validation():
    with pytest.raises(ValueError):
        RoiMap(ids=[0], vertices=np.zeros((1, 4, 3)))
    with pytest.raises(ValueError):
        RoiMap(ids=[0, 1], vertices=_box([1, 1, 1], [1, 1, 1])[None])
    with pytest.raises(ValueError):
        _map(_box([1, 1, 1], [1, 1, 1]), _box([5, 1, 1], [1, 1, 1]), ids=[2, 2])
    with pytest.raises(ValueError):
        _map(_box([10, 0, 0], [1, 1, 0]))


def test_ray_box_hits_and_misses():
    boxes = np.stack([_box([20, 0, 0], [2, 2, 2]), _box([-20, 0, 0], [2, 2, 2]), _box([20, 10, 0], [1, 1, 1])])
    d = ray_box_distances(np.array([1.0, 0.0, 0.0]), boxes)
    assert d[0] == 0.0
    # the box behind the origin is never hit
    assert d[1] > math.pi / 2
    assert d[2] > 0.0
    oblique = np.array([2.0, 1.0, 0.0]) / math.sqrt(5.0)
    assert ray_box_distances(oblique, boxes)[2] == 0.0
    rois = _map(*boxes)
    assert match_roi([1.0, 0.05, 0.0], rois, IDENT, method="ray_box").roi_id == 0
