"""Batch export of mask and feature frames in the fusion engine's formats.

The exporter is a file adapter: multi-view images plus a cameras file and a
prompt list go in, SNHQMSK1/SNHQFTR1 frames plus a copy of cameras.json and
a manifest come out.  It never imports the engine; the byte formats are the
contract.
"""

import json
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import View, load_views
from .errors import InputMismatch, PromptOutOfBounds
from .model import resolve_model
from .ppm import list_images, read_ppm

MASK_MAGIC = b"SNHQMSK1"
FEATURE_MAGIC = b"SNHQFTR1"


@dataclass
class ExportJob:
    image_dir: str
    cameras_path: str
    prompts: list[dict] = field(default_factory=list)
    out_dir: str = "exported"
    model: str = "builtin-colorseed"


def load_prompts(path) -> list[dict]:
    with open(path) as f:
        doc = json.load(f)
    entries = doc.get("prompts")
    if not isinstance(entries, list):
        raise InputMismatch(f"{path}: expected a top-level 'prompts' list")
    for i, e in enumerate(entries):
        _check_prompt(e, where=f"{path}: prompts[{i}]")
    return entries


def _check_prompt(e, where="prompt"):
    if not isinstance(e, dict):
        raise InputMismatch(f"{where}: not an object")
    has_xyz = "xyz" in e
    has_pixel = "view_id" in e and "pixel" in e
    if has_xyz == has_pixel:
        raise InputMismatch(f"{where}: need either 'xyz' or 'view_id'+'pixel'")
    if int(e.get("object_id", 0)) < 1:
        raise InputMismatch(f"{where}: object_id must be a positive integer")
    if e.get("polarity", "positive") not in ("positive", "negative"):
        raise InputMismatch(f"{where}: polarity must be 'positive' or 'negative'")


def _place_prompts(prompts, pairs, model):
    """Anchor every prompt to concrete pixels per view.

    3D prompts are projected into each view and kept where they land in
    front of the camera and inside the frame.  The adapter has no depth, so
    occlusion is approximated by seed-color consensus: a projection whose
    landed color disagrees with the prompt's majority color across views is
    judged to have hit an occluder, and the seed moves to the nearest pixel
    of consensus color if the view shows any (a partially hidden object) or
    is dropped (a fully hidden one).  2D prompts apply only to their own
    view and are never second-guessed.  A prompt that survives in no view
    at all is an error.
    Returns ({view_id: [(px, py, object_id, polarity)]}, provenance).
    """
    by_id = {v.view_id: (v, img) for v, img in pairs}
    seeds = {v.view_id: [] for v, _ in pairs}
    provenance = []
    for i, e in enumerate(prompts):
        _check_prompt(e, where=f"prompts[{i}]")
        object_id = int(e["object_id"])
        polarity = e.get("polarity", "positive")
        placed = []
        rejected = []
        if "xyz" in e:
            xyz = np.asarray(e["xyz"], dtype=np.float64)
            landed = []
            for v, img in pairs:
                pix, ok = v.project(xyz)
                px, py = float(pix[0, 0]), float(pix[0, 1])
                if ok[0] and v.contains(px, py):
                    landed.append((v.view_id, px, py, model.seed_color(img, px, py)))
            kept, star = _seed_consensus(landed, model)
            for view_id, px, py, color in kept:
                seeds[view_id].append((px, py, object_id, polarity))
                placed.append({"view_id": view_id, "pixel": [px, py]})
            kept_ids = {p["view_id"] for p in placed}
            for view_id, px, py, _ in landed:
                if view_id in kept_ids:
                    continue
                snapped = model.snap_to_color(by_id[view_id][1], star, px, py)
                if snapped is None:
                    rejected.append({"view_id": view_id, "pixel": [px, py], "reason": "object not visible"})
                else:
                    seeds[view_id].append((snapped[0], snapped[1], object_id, polarity))
                    placed.append({"view_id": view_id, "pixel": list(snapped), "snapped_from": [px, py]})
        else:
            vid = int(e["view_id"])
            if vid not in by_id:
                raise PromptOutOfBounds(f"prompts[{i}]: view {vid} not in cameras file")
            v, _ = by_id[vid]
            px, py = (float(x) for x in e["pixel"])
            if not v.contains(px, py):
                raise PromptOutOfBounds(f"prompts[{i}]: pixel ({px}, {py}) outside view {vid} ({v.width}x{v.height})")
            seeds[vid].append((px, py, object_id, polarity))
            placed.append({"view_id": vid, "pixel": [px, py]})
        if not placed:
            raise PromptOutOfBounds(f"prompts[{i}]: projects into no view")
        provenance.append({"prompt": e, "placed": placed, "rejected": rejected})
    return seeds, provenance


def _seed_consensus(landed, model):
    """Placements agreeing with the prompt's majority color, plus that color.

    The medoid seed (smallest median color distance to the others) stands
    in for the unoccluded appearance; with more than half the views clean,
    occluded projections are the outliers.
    """
    if len(landed) <= 2:
        star = landed[0][3] if landed else None
        return landed, star
    colors = np.array([c for *_, c in landed])
    d2 = ((colors[:, None, :] - colors[None, :, :]) ** 2).sum(axis=2)
    star = colors[np.argmin(np.median(d2, axis=1))]
    return [entry for entry in landed if model.colors_match(star, entry[3])], star


def _matched_images(job: ExportJob):
    """(view, image) pairs for every image that has a camera, dims checked."""
    views = {v.view_id: v for v in load_views(job.cameras_path)}
    pairs = []
    for view_id, path in list_images(job.image_dir):
        if view_id not in views:
            raise InputMismatch(f"{path}: no camera with id {view_id}")
        v = views[view_id]
        img = read_ppm(path)
        if img.shape[:2] != (v.height, v.width):
            raise InputMismatch(
                f"{path}: image is {img.shape[1]}x{img.shape[0]}, camera {view_id} says {v.width}x{v.height}"
            )
        pairs.append((v, img))
    return pairs


def _write_frame(path, magic, view_id: int, array: np.ndarray):
    h, w, ch = array.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<IIII", view_id, h, w, ch))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _finish(job: ExportJob, kind: str, extra: dict, outputs: list) -> list:
    out = Path(job.out_dir)
    shutil.copyfile(job.cameras_path, out / "cameras.json")
    manifest = {
        "kind": kind,
        "model": job.model,
        "image_dir": str(job.image_dir),
        "cameras": str(job.cameras_path),
        "outputs": [str(p) for p in outputs],
        **extra,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return outputs


def export_masks(job: ExportJob) -> list:
    """One SNHQMSK1 file per image; returns the written paths."""
    model = resolve_model(job.model)
    pairs = _matched_images(job)
    if not job.prompts:
        raise InputMismatch("mask export needs at least one prompt")
    seeds, provenance = _place_prompts(job.prompts, pairs, model)
    n_channels = max(int(e["object_id"]) for e in job.prompts) + 1
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for v, img in pairs:
        probs = model.decode(img, seeds[v.view_id], n_channels)
        worst = np.abs(probs.sum(axis=2) - 1.0).max()
        if worst > 1e-6:
            raise InputMismatch(f"view {v.view_id}: decoder produced unnormalized rows (off by {worst})")
        path = out / f"mask_{v.view_id:05d}.snhq"
        _write_frame(path, MASK_MAGIC, v.view_id, probs)
        outputs.append(path)
    return _finish(job, "masks", {"n_channels": n_channels, "prompts": provenance}, outputs)


def export_features(job: ExportJob) -> list:
    """One SNHQFTR1 file per image at the encoder's spatial resolution."""
    model = resolve_model(job.model)
    pairs = _matched_images(job)
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for v, img in pairs:
        feats = model.encode(img)
        path = out / f"feature_{v.view_id:05d}.snhq"
        _write_frame(path, FEATURE_MAGIC, v.view_id, feats)
        outputs.append(path)
    extra = {"channels": model.feature_channels, "stride": model.feature_stride}
    return _finish(job, "features", extra, outputs)
