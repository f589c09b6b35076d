"""Per-view 2D frames: ground-truth projection, noise models, binary cache.

A mask frame stores a full probability vector per pixel even when it is
one-hot, so the same container serves synthetic ground truth and soft
segmenter exports.  Feature frames share the layout with C channels and no
normalization requirement.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BadMagic, DimMismatch, NotNormalized, ValidationError
from .render import normalized_depth, sample_batch, stratified_samples

MASK_MAGIC = b"SNHQMSK1"
FEATURE_MAGIC = b"SNHQFTR1"
NORM_TOL = 1e-3


@dataclass
class MaskFrame:
    view_id: int
    probs: np.ndarray  # (H, W, L)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValidationError("mask frame needs (H, W, L) probabilities")

    @property
    def shape(self):
        return self.probs.shape

    @property
    def n_channels(self) -> int:
        return self.probs.shape[2]

    def labels(self) -> np.ndarray:
        """Per-pixel argmax labels; ties go to the lowest channel."""
        return self.probs.argmax(axis=2)

    def check_normalized(self):
        sums = self.probs.sum(axis=2)
        worst = float(np.abs(sums - 1.0).max(initial=0.0))
        if worst > NORM_TOL:
            raise NotNormalized(f"view {self.view_id}: channel sums off by {worst:.2e}")


@dataclass
class FeatureFrame:
    view_id: int
    values: np.ndarray  # (H, W, C)

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]


def one_hot(labels: np.ndarray, n_channels: int) -> np.ndarray:
    h, w = labels.shape
    probs = np.zeros((h, w, n_channels))
    np.put_along_axis(probs, labels[..., None], 1.0, axis=2)
    return probs


def mask_filename(view_id: int) -> str:
    return f"mask_{view_id:05d}.snhq"


def feature_filename(view_id: int) -> str:
    return f"feature_{view_id:05d}.snhq"


def _store(path, magic, view_id, array):
    h, w, ch = array.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<IIII", view_id, h, w, ch))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _load(path, magic):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != magic:
        raise BadMagic(f"{path}: not a {magic.decode()} file")
    view_id, h, w, ch = struct.unpack_from("<IIII", raw, 8)
    body = raw[24:]
    if len(body) != h * w * ch * 4:
        raise DimMismatch(f"{path}: payload {len(body)} bytes, header implies {h * w * ch * 4}")
    array = np.frombuffer(body, dtype="<f4").reshape(h, w, ch).astype(np.float64)
    return view_id, array


def store_frame(frame: MaskFrame, path):
    frame.check_normalized()
    _store(path, MASK_MAGIC, frame.view_id, frame.probs)


def load_frame(path) -> MaskFrame:
    view_id, probs = _load(path, MASK_MAGIC)
    frame = MaskFrame(view_id=view_id, probs=probs)
    frame.check_normalized()
    return frame


def store_feature_frame(frame: FeatureFrame, path):
    _store(path, FEATURE_MAGIC, frame.view_id, frame.values)


def load_feature_frame(path) -> FeatureFrame:
    view_id, values = _load(path, FEATURE_MAGIC)
    return FeatureFrame(view_id=view_id, values=values)


# ---------------------------------------------------------------------------
# ground-truth projection


def surface_points_for_view(scene, camera, n_samples=128, batch_rays=16384, opacity_threshold=0.5):
    """Expected hit point per pixel via opacity-normalized depth.

    Returns (points (H*W, 3), solid (H*W,) bool); pixels whose ray misses the
    scene box or stays translucent are not solid and their point is zeros.
    """
    from .geometry import rays_for_pixels

    h, w = camera.height, camera.width
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    origins, dirs, t0, t1, hit = rays_for_pixels(camera, px.ravel(), py.ravel(), scene.bbox)
    points = np.zeros((h * w, 3))
    solid = np.zeros(h * w, dtype=bool)
    live = np.flatnonzero(hit)
    for start in range(0, live.size, batch_rays):
        sel = live[start : start + batch_rays]
        t, delta = stratified_samples(t0[sel], t1[sel], n_samples, jitter=False)
        act = sample_batch(scene, origins[sel], dirs[sel], t, delta)
        depth = act.composite(act.t)
        t_surf = normalized_depth(depth, act.opacity, opacity_threshold)
        ok = t_surf > 0.0
        points[sel[ok]] = origins[sel[ok]] + t_surf[ok, None] * dirs[sel[ok]]
        solid[sel[ok]] = True
    return points, solid


def project_gt_masks(scene, cameras, n_samples=128) -> list[MaskFrame]:
    """One-hot ground-truth mask frames via depth-rendered surface lookup.

    The scene label at each pixel's expected hit point becomes the pixel's
    one-hot channel; rays that miss the box or never reach half opacity get
    the background channel.
    """
    n_channels = scene.num_labels()
    frames = []
    for camera in cameras:
        h, w = camera.height, camera.width
        labels = np.zeros(h * w, dtype=np.int64)
        points, solid = surface_points_for_view(scene, camera, n_samples=n_samples)
        if solid.any():
            labels[solid] = scene.gt_label(points[solid])
        frames.append(MaskFrame(view_id=camera.view_id, probs=one_hot(labels.reshape(h, w), n_channels)))
    return frames


def project_feature_frames(scene, cameras, feature_fn, n_samples=128, batch_rays=16384) -> list[FeatureFrame]:
    """Composite an analytic per-point feature function into per-view frames.

    feature_fn(points (N, 3)) -> (N, C).  Because the frames are produced by
    the same compositing model the trainable grid renders through, a smooth
    feature function gives realizable distillation targets.
    """
    from .geometry import rays_for_pixels

    frames = []
    channels = None
    for camera in cameras:
        h, w = camera.height, camera.width
        px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        origins, dirs, t0, t1, hit = rays_for_pixels(camera, px.ravel(), py.ravel(), scene.bbox)
        live = np.flatnonzero(hit)
        values = None
        for start in range(0, live.size, batch_rays):
            sel = live[start : start + batch_rays]
            t, delta = stratified_samples(t0[sel], t1[sel], n_samples, jitter=False)
            act = sample_batch(scene, origins[sel], dirs[sel], t, delta)
            feats = feature_fn(act.points) if act.points.size else np.zeros((0, 1))
            if channels is None:
                channels = feats.shape[1]
            if values is None:
                values = np.zeros((h * w, channels))
            values[sel] = act.composite(feats)
        if values is None:
            values = np.zeros((h * w, channels or 1))
        frames.append(FeatureFrame(view_id=camera.view_id, values=values.reshape(h, w, -1)))
    return frames


# ---------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class CorruptionSpec:
    boundary_dilate_px: int = 0
    boundary_erode_px: int = 0
    flip_rate: float = 0.0
    drop_view_rate: float = 0.0
    blob_rate: float = 0.0
    blob_radius_px: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_rate", "drop_view_rate", "blob_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if min(self.boundary_dilate_px, self.boundary_erode_px, self.blob_radius_px) < 0:
            raise ValidationError("corruption radii must be non-negative")


def disc_element(radius_px: int) -> np.ndarray:
    """Boolean disc: offsets with x^2 + y^2 <= radius^2."""
    r = int(radius_px)
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= r * r


def _morph_labels(labels: np.ndarray, n_channels: int, dilate_px: int, erode_px: int) -> np.ndarray:
    """Dilate/erode each object's support; overlaps resolve to the lowest id."""
    if dilate_px == 0 and erode_px == 0:
        return labels
    out = np.zeros_like(labels)
    claimed = np.zeros(labels.shape, dtype=bool)
    for obj in range(1, n_channels):
        support = labels == obj
        if not support.any():
            continue
        if dilate_px > 0:
            support = ndimage.binary_dilation(support, structure=disc_element(dilate_px))
        if erode_px > 0:
            support = ndimage.binary_erosion(support, structure=disc_element(erode_px))
        take = support & ~claimed
        out[take] = obj
        claimed |= support
    return out


def corrupt_masks(frames: list[MaskFrame], spec: CorruptionSpec) -> list[MaskFrame]:
    """Simulate segmenter failure modes on one-hot frames.

    Fixed order: per-object morphology, then spurious discs, then pixel
    flips, then whole-view drops.  Deterministic under spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    for frame in frames:
        h, w, n_channels = frame.shape
        labels = _morph_labels(frame.labels(), n_channels, spec.boundary_dilate_px, spec.boundary_erode_px)

        if spec.blob_rate > 0.0 and n_channels > 1:
            r = max(spec.blob_radius_px, 1)
            count = int(round(spec.blob_rate * h * w / (np.pi * r * r)))
            disc = disc_element(r)
            dy, dx = np.nonzero(disc)
            dy = dy - r
            dx = dx - r
            for _ in range(count):
                cy = int(rng.integers(0, h))
                cx = int(rng.integers(0, w))
                lab = int(rng.integers(1, n_channels))
                yy = cy + dy
                xx = cx + dx
                keep = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                labels[yy[keep], xx[keep]] = lab

        if spec.flip_rate > 0.0:
            flip = rng.random((h, w)) < spec.flip_rate
            labels = np.where(flip, rng.integers(0, n_channels, size=(h, w)), labels)

        out.append(MaskFrame(view_id=frame.view_id, probs=one_hot(labels, n_channels)))

    n_drop = int(round(spec.drop_view_rate * len(out)))
    if n_drop > 0:
        drop = rng.choice(len(out), size=n_drop, replace=False)
        for i in drop:
            h, w, n_channels = out[i].shape
            out[i] = MaskFrame(view_id=out[i].view_id, probs=one_hot(np.zeros((h, w), dtype=np.int64), n_channels))
    return out
