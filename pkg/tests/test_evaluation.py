import json

import numpy as np
import pytest

from maskfield.errors import DimMismatch
from maskfield.evaluation import (
    ConsistencyReport,
    EvalReport,
    cross_view_consistency,
    per_view_miou,
    save_report,
    score,
)
from maskfield.fields import TrainableGrid
from maskfield.masks import MaskFrame, one_hot
from maskfield.presets import orbit_cameras, two_sphere_scene


def frame(labels, n_channels=3, view_id=0):
    return MaskFrame(view_id=view_id, probs=one_hot(np.asarray(labels, dtype=np.int64), n_channels))


def square_labels(h=10, w=10, r0=3, r1=7, c0=0, c1=6, obj=1):
    lab = np.zeros((h, w), dtype=np.int64)
    lab[r0:r1, c0:c1] = obj
    return lab


def test_perfect_prediction_scores_one():
    gt = frame(square_labels())
    report = score([gt], [gt])
    assert report.miou == 1.0
    assert report.mean_acc == 1.0
    assert report.views_used == 1
    obj = report.per_object[0]
    assert obj.object_id == 1 and obj.fp == 0 and obj.fn == 0


def test_disjoint_prediction_scores_zero():
    gt = frame(square_labels(c0=0, c1=3))
    pred = frame(square_labels(c0=5, c1=8))
    assert score([pred], [gt]).miou == 0.0


def test_shifted_square_iou_is_one_third():
    gt = frame(square_labels(c0=0, c1=6))  # 4x6 block
    pred = frame(square_labels(c0=3, c1=9))  # same block shifted by half its width
    report = score([pred], [gt])
    obj = report.per_object[0]
    assert obj.tp == 12 and obj.fp == 12 and obj.fn == 12
    assert report.miou == pytest.approx(1 / 3)
    assert obj.tn == 100 - 36


def test_counts_cover_every_pixel():
    rng = np.random.default_rng(0)
    gt = frame(rng.integers(0, 3, (13, 9)))
    pred = frame(rng.integers(0, 3, (13, 9)))
    for obj in score([pred], [gt]).per_object:
        assert obj.tp + obj.fp + obj.fn + obj.tn == 13 * 9


def test_scores_pool_pixels_rather_than_average_views():
    """A false positive in a view where the object is absent must dilute the
    pooled IoU instead of being dropped as an undefined per-view score."""
    gt1 = frame(square_labels(), view_id=0)
    gt2 = frame(np.zeros((10, 10)), view_id=1)
    pred2 = np.zeros((10, 10), dtype=np.int64)
    pred2[0, :4] = 1
    pooled = score([gt1, frame(pred2, view_id=1)], [gt1, gt2])
    obj = pooled.per_object[0]
    assert obj.fp == 4
    assert pooled.miou == pytest.approx(24 / 28)
    views = per_view_miou([gt1, frame(pred2, view_id=1)], [gt1, gt2])
    assert views[0] == 1.0
    assert views[1] == 0.0  # object absent from gt; nothing to average


def test_objects_missing_from_gt_are_skipped():
    gt = frame(square_labels(), n_channels=4)
    report = score([gt], [gt], object_ids=[1, 2, 3])
    by_id = {o.object_id: o for o in report.per_object}
    assert not by_id[1].skipped
    assert by_id[2].skipped and by_id[3].skipped
    assert report.miou == 1.0  # skipped objects do not drag the mean


def test_all_objects_missing_gives_zero_report():
    gt = frame(np.zeros((5, 5)))
    report = score([gt], [gt])
    assert report.miou == 0.0 and report.mean_acc == 0.0
    assert all(o.skipped for o in report.per_object)


def test_frame_list_length_mismatch_raises():
    gt = frame(square_labels())
    with pytest.raises(DimMismatch):
        score([gt, gt], [gt])


def test_frame_size_mismatch_raises():
    with pytest.raises(DimMismatch):
        score([frame(np.zeros((4, 4)))], [frame(np.zeros((5, 5)))])


def test_argmax_ties_break_to_background():
    probs = np.full((2, 2, 3), 1 / 3)
    gt = frame(np.zeros((2, 2)))
    report = score([MaskFrame(view_id=0, probs=probs)], [gt])
    assert all(o.skipped for o in report.per_object)


def test_report_serializes(tmp_path):
    gt = frame(square_labels())
    report = score([gt], [gt])
    path = tmp_path / "report.json"
    save_report(path, report)
    doc = json.loads(path.read_text())
    assert doc["miou"] == 1.0
    assert doc["per_object"][0]["object_id"] == 1
    assert doc["views_used"] == 1


# --- cross-view agreement ------------------------------------------------------


def test_a_view_always_agrees_with_itself():
    scene = two_sphere_scene()
    cams = orbit_cameras(2, width=24, height=24, focal=21.0)
    grid = TrainableGrid.zeros(scene.bbox, 3, (6,))
    grid.levels[0].values[:] = np.random.default_rng(3).normal(size=grid.levels[0].values.shape)
    report = cross_view_consistency(scene, grid, cams, [(0, 0)], samples_per_pair=128, n_samples=48)
    assert report.agreement == 1.0
    assert report.compared > 0
    assert report.pairs == 1
    assert report.requested == 128


def test_consistency_filters_points_invisible_to_the_partner():
    scene = two_sphere_scene()
    cams = orbit_cameras(4, width=24, height=24, focal=21.0)
    grid = TrainableGrid.zeros(scene.bbox, 3, (6,))
    # opposite cameras see opposite hemispheres, so most samples drop out
    report = cross_view_consistency(scene, grid, cams, [(0, 2)], samples_per_pair=200, n_samples=48)
    assert report.compared < report.requested
    # zero logits label everything background, so surviving points agree
    if report.compared:
        assert report.agreement == 1.0


def test_consistency_report_roundtrip():
    rep = ConsistencyReport(agreement=0.5, compared=10, requested=20, pairs=2)
    assert ConsistencyReport(**rep.to_dict()) == rep
