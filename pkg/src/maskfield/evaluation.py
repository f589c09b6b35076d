"""Segmentation scoring and cross-view agreement.

IoU and accuracy are computed per object from pixel counts pooled over all
evaluated views (not averaged per view), then averaged over objects.
Predictions binarize by per-pixel argmax; ties break toward the lowest
channel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimMismatch
from .geometry import project_many
from .masks import surface_points_for_view
from .render import render_view


@dataclass
class ObjectScore:
    object_id: int
    iou: float
    acc: float
    tp: int
    fp: int
    fn: int
    tn: int
    skipped: bool = False  # object absent from ground truth; IoU undefined


@dataclass
class EvalReport:
    per_object: list
    miou: float
    mean_acc: float
    views_used: int

    def to_dict(self) -> dict:
        return {
            "per_object": [asdict(o) for o in self.per_object],
            "miou": self.miou,
            "mean_acc": self.mean_acc,
            "views_used": self.views_used,
        }


def save_report(path, report) -> None:
    doc = report.to_dict() if hasattr(report, "to_dict") else report
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def score(pred_frames, gt_frames, object_ids=None) -> EvalReport:
    """Pooled per-object IoU/accuracy over matched frame lists.

    object_ids defaults to every foreground channel index.  Objects with no
    ground-truth pixels anywhere are reported skipped and excluded from the
    means.
    """
    if len(pred_frames) != len(gt_frames):
        raise DimMismatch(f"{len(pred_frames)} prediction frames vs {len(gt_frames)} ground truth")
    pred_labels = []
    gt_labels = []
    for pf, gf in zip(pred_frames, gt_frames):
        if pf.probs.shape[:2] != gf.probs.shape[:2]:
            raise DimMismatch(f"view {gf.view_id}: frame sizes differ")
        pred_labels.append(pf.labels().ravel())
        gt_labels.append(gf.labels().ravel())
    pred = np.concatenate(pred_labels)
    gt = np.concatenate(gt_labels)
    if object_ids is None:
        n_channels = max(f.n_channels for f in gt_frames)
        object_ids = list(range(1, n_channels))

    per_object = []
    for obj in object_ids:
        p = pred == obj
        g = gt == obj
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        tn = int(np.count_nonzero(~p & ~g))
        if tp + fn == 0:
            per_object.append(ObjectScore(obj, 0.0, 0.0, tp, fp, fn, tn, skipped=True))
            continue
        union = tp + fp + fn
        iou = tp / union if union else 1.0
        acc = (tp + tn) / (tp + fp + fn + tn)
        per_object.append(ObjectScore(obj, iou, acc, tp, fp, fn, tn))

    live = [o for o in per_object if not o.skipped]
    miou = float(np.mean([o.iou for o in live])) if live else 0.0
    mean_acc = float(np.mean([o.acc for o in live])) if live else 0.0
    return EvalReport(per_object=per_object, miou=miou, mean_acc=mean_acc, views_used=len(gt_frames))


def per_view_miou(pred_frames, gt_frames, object_ids=None):
    """Single-view mIoU per frame pair; the mean characterizes input quality."""
    return [score([p], [g], object_ids).miou for p, g in zip(pred_frames, gt_frames)]


@dataclass
class ConsistencyReport:
    agreement: float
    compared: int
    requested: int
    pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


def cross_view_consistency(scene, grid, cameras, pairs, samples_per_pair=512, n_samples=128, eps_vis=0.05, seed=0) -> ConsistencyReport:
    """Label agreement between views at mutually visible surface points.

    For each (a, b) camera-index pair, surface points are sampled from view
    a's rendered depth, reprojected into view b, filtered to points whose
    depth matches view b's own surface within a relative eps_vis, and the
    two views' argmax labels are compared.  Agreement pools over all pairs.
    """
    rng = np.random.default_rng(seed)
    involved = sorted({i for pair in pairs for i in pair})
    label_img = {}
    surf_pts = {}
    surf_solid = {}
    surf_z = {}
    for vi in involved:
        cam = cameras[vi]
        mask = render_view(scene, cam, field=grid, n_samples=n_samples, want=("mask",))["mask"]
        label_img[vi] = mask.argmax(axis=2)
        pts, solid = surface_points_for_view(scene, cam, n_samples=n_samples)
        surf_pts[vi] = pts
        surf_solid[vi] = solid
        zmap = np.zeros(pts.shape[0])
        if solid.any():
            _, depths, _ = project_many(cam, pts[solid])
            zmap[solid] = depths
        surf_z[vi] = zmap

    agree = 0
    compared = 0
    requested = 0
    for a, b in pairs:
        cam_a, cam_b = cameras[a], cameras[b]
        cand = np.flatnonzero(surf_solid[a])
        if cand.size == 0:
            requested += samples_per_pair
            continue
        take = min(samples_per_pair, cand.size)
        requested += samples_per_pair
        chosen = rng.choice(cand, size=take, replace=False)
        pts = surf_pts[a][chosen]
        pix_b, z_b, front = project_many(cam_b, pts)
        bx = np.floor(pix_b[:, 0] + 0.5).astype(np.int64)
        by = np.floor(pix_b[:, 1] + 0.5).astype(np.int64)
        inb = front & (bx >= 0) & (bx < cam_b.width) & (by >= 0) & (by < cam_b.height)
        keep = np.flatnonzero(inb)
        if keep.size == 0:
            continue
        flat_b = by[keep] * cam_b.width + bx[keep]
        z_surf = surf_z[b][flat_b]
        visible = (z_surf > 0) & (np.abs(z_b[keep] - z_surf) <= eps_vis * z_surf)
        keep = keep[visible]
        if keep.size == 0:
            continue
        la = label_img[a].ravel()[chosen[keep]]
        lb = label_img[b].ravel()[by[keep] * cam_b.width + bx[keep]]
        agree += int(np.count_nonzero(la == lb))
        compared += keep.size

    agreement = agree / compared if compared else 0.0
    return ConsistencyReport(agreement=float(agreement), compared=int(compared), requested=int(requested), pairs=len(pairs))
