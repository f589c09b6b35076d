"""Lifting per-view 2D masks into a 3D object field over a frozen scene.

Training alternates two ray populations: a global batch drawn uniformly over
all retained pixels carries the cross-entropy term, and error-guided local
patches carry the ray-pair color loss that pulls rays with similar rendered
RGB toward the same identity.  Per-view error maps (downsampled, overwrite
semantics) steer where the patches land.

Determinism contract: every stochastic choice comes either from the
counter-based jitter (keyed by seed/view/pixel/iteration) or from one master
generator consumed in a fixed sequence on the controller.  Worker threads
only evaluate pure per-block functions into ordered slots; gradients,
losses, and error-map writes are reduced sequentially in block order, so the
result is bit-identical for any worker count.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields as dc_fields, replace
from math import ceil

import numpy as np

from .errors import ChannelMismatch, NanLoss, NoViewsRetained, ValidationError
from .fields import TrainableGrid
from .geometry import project_many, rays_for_pixels
from .render import (
    normalized_depth,
    sample_batch,
    softmax_backward,
    softmax_rows,
    stratified_samples,
)

BLOCK_RAYS = 512  # fixed work-unit size so partitioning never depends on worker count


@dataclass
class FusionConfig:
    """Knobs for object-field training; mirrored 1:1 by the JSON config file."""

    n_channels: int  # identity channels, background included
    iterations: int = 600
    warmup_iters: int = 300  # color loss joins after this many iterations
    global_batch: int = 4096
    rgb_refs: int = 20  # reference rays per patch set
    patch_size: int = 8
    rays_per_patch: int = 32
    error_points: int = 8  # error-guided seeds per iteration
    tau: float = 0.05  # rgb-distance threshold for "same color"
    w: float = 4.0  # mask-distance sharpness
    eps: float = 0.0  # mask-distance offset
    errmap_downsample: int = 4
    errmap_full_update_every: int = 200
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    samples_per_ray: int = 128
    seed: int = 0
    grid_levels: tuple = (32, 128)
    eps_vis: float = 0.05  # relative depth slack for reprojection visibility
    similar_above_tau: bool = False  # ablation: treat distance >= tau as similar

    def __post_init__(self):
        if self.n_channels < 1:
            raise ValidationError("n_channels must be >= 1")
        if self.warmup_iters > self.iterations:
            raise ValidationError("warmup_iters must not exceed iterations")
        if self.tau < 0:
            raise ValidationError("tau must be >= 0")
        if self.w <= 0:
            raise ValidationError("w must be > 0")
        counts = (
            self.global_batch,
            self.rgb_refs,
            self.patch_size,
            self.rays_per_patch,
            self.error_points,
            self.errmap_downsample,
            self.errmap_full_update_every,
            self.samples_per_ray,
        )
        if min(counts) < 1:
            raise ValidationError("all count parameters must be >= 1")
        object.__setattr__(self, "grid_levels", tuple(int(r) for r in self.grid_levels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_levels"] = list(self.grid_levels)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "FusionConfig":
        names = {f.name for f in dc_fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kw) -> "FusionConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def save_config(path, cfg: FusionConfig):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)


def load_config(path) -> FusionConfig:
    with open(path) as f:
        return FusionConfig.from_dict(json.load(f))


def write_trace(path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "L_o", "L_RGB", "total"])
        for row in trace:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


# ---------------------------------------------------------------------------
# losses


def cross_entropy(gt, pred):
    """Per-ray cross entropy, averaged over channels; rows if inputs are 2D."""
    gt2 = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    pred2 = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    vals = -(gt2 * np.log(np.clip(pred2, 1e-12, None))).sum(axis=-1) / gt2.shape[-1]
    return float(vals[0]) if np.ndim(gt) == 1 else vals


def rgb_similarity(c0, c1):
    """Euclidean distance between colors; rows if inputs are 2D."""
    d = np.asarray(c0, dtype=np.float64) - np.asarray(c1, dtype=np.float64)
    out = np.sqrt(np.einsum("...i,...i->...", d, d))
    return float(out) if out.ndim == 0 else out


def mask_distance(m0, m1, w=4.0, eps=0.0):
    """exp(-w * (m0 . m1) / max(|m0|^2, |m1|^2) - eps), rows if 2D.

    Identical distributions score exp(-w - eps) (low error), orthogonal ones
    exp(-eps) (high error).  Zero-vector pairs define the ratio as 0.
    """
    a0 = np.atleast_2d(np.asarray(m0, dtype=np.float64))
    a1 = np.atleast_2d(np.asarray(m1, dtype=np.float64))
    dot = (a0 * a1).sum(axis=-1)
    denom = np.maximum((a0 * a0).sum(axis=-1), (a1 * a1).sum(axis=-1))
    ratio = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
    out = np.exp(-w * ratio - eps)
    return float(out[0]) if np.ndim(m0) == 1 and np.ndim(m1) == 1 else out


def mask_distance_with_grad(ref, others, w=4.0, eps=0.0):
    """mask_distance(ref, row) per row plus d/d(row); ref is a constant.

    With a = ref . m and b = max(|ref|^2, |m|^2), the b branch depends on
    which norm wins: when |m|^2 > |ref|^2 both a and b move with m, otherwise
    only a does.  Ties take the constant-b branch.
    """
    ref = np.asarray(ref, dtype=np.float64)
    others = np.atleast_2d(np.asarray(others, dtype=np.float64))
    a = others @ ref
    n_ref = float(ref @ ref)
    n_oth = (others * others).sum(axis=1)
    b = np.maximum(n_ref, n_oth)
    pos = b > 0
    ratio = np.divide(a, b, out=np.zeros_like(a), where=pos)
    f = np.exp(-w * ratio - eps)
    d_ratio = np.zeros_like(others)
    safe_b = np.where(pos, b, 1.0)
    d_ratio[pos] = ref / safe_b[pos, None]
    var = pos & (n_oth > n_ref)
    d_ratio[var] -= (2.0 * a[var] / (safe_b[var] ** 2))[:, None] * others[var]
    grad = (-w * f)[:, None] * d_ratio
    return f, grad


def pair_loss_fixed_refs(colors, probs, ref_indices, ref_probs, cfg: FusionConfig):
    """Ray-pair color loss with pinned reference distributions.

    Each reference k gathers the other rays whose rendered color sits within
    tau of its own; the loss averages mask_distance(ref_probs[k], member)
    over the set and then over references with non-empty sets.  Gradients
    are taken with respect to probs only, so passing ref_probs captured from
    an earlier parameter state realizes the reference-side detach.

    Returns (loss, d loss / d probs, references_used).
    """
    dprobs = np.zeros_like(probs)
    terms = []
    pending = []
    for ref, ref_p in zip(ref_indices, ref_probs):
        dist = rgb_similarity(colors, colors[ref])
        close = dist >= cfg.tau if cfg.similar_above_tau else dist <= cfg.tau
        close[ref] = False
        members = np.flatnonzero(close)
        if members.size == 0:
            continue
        f, grad = mask_distance_with_grad(ref_p, probs[members], cfg.w, cfg.eps)
        terms.append(f.mean())
        pending.append((members, grad / members.size))
    if not terms:
        return 0.0, dprobs, 0
    used = len(terms)
    for members, grad in pending:
        np.add.at(dprobs, members, grad / used)
    return float(np.sum(terms) / used), dprobs, used


def ray_pair_rgb_loss(colors, probs, cfg: FusionConfig, rng: np.random.Generator):
    """Color-similarity consistency loss over one ray set.

    Draws up to cfg.rgb_refs reference rays without replacement, then scores
    them against the current distributions; gradients flow only through the
    member argument (the reference side is treated as constant).

    Returns (loss, d loss / d probs, references_used).
    """
    n = len(colors)
    if n == 0:
        return 0.0, np.zeros_like(probs), 0
    refs = rng.choice(n, size=min(cfg.rgb_refs, n), replace=False)
    return pair_loss_fixed_refs(colors, probs, refs, probs[refs].copy(), cfg)


# ---------------------------------------------------------------------------
# error maps


class ErrorMapSet:
    """Per-view downsampled error grids steering local patch sampling.

    Cell values are mask_distance(gt, rendered) at the latest ray seen in
    that cell; high values mark disagreement.  Cells start at the maximum
    error so early patches explore everywhere.
    """

    def __init__(self, view_ids, image_shapes, downsample, w, eps):
        self.downsample = int(downsample)
        self.w = w
        self.eps = eps
        self.view_ids = list(view_ids)
        self.maps = {}
        for vid, (h, wd) in zip(self.view_ids, image_shapes):
            rows = ceil(h / self.downsample)
            cols = ceil(wd / self.downsample)
            self.maps[vid] = np.full((rows, cols), np.exp(-eps))

    def cells_of(self, view_id, px, py):
        cols = self.maps[view_id].shape[1]
        return (np.asarray(py) // self.downsample) * cols + np.asarray(px) // self.downsample

    def overwrite(self, view_id, px, py, values):
        """Write f values into containing cells; the last ray in order wins."""
        cells = self.cells_of(view_id, px, py)
        rev_cells = cells[::-1]
        uniq, first = np.unique(rev_cells, return_index=True)
        self.maps[view_id].ravel()[uniq] = values[::-1][first]

    def set_view(self, view_id, values):
        m = self.maps[view_id]
        m[...] = np.asarray(values, dtype=np.float64).reshape(m.shape)

    def cell_center_pixels(self, view_id, height, width):
        """One pixel per cell: the cell center, clipped into the image."""
        s = self.downsample
        rows, cols = self.maps[view_id].shape
        cy, cx = np.mgrid[0:rows, 0:cols]
        py = np.minimum(cy.ravel() * s + s // 2, height - 1)
        px = np.minimum(cx.ravel() * s + s // 2, width - 1)
        return px, py

    def draw(self, rng: np.random.Generator, count):
        """count (view_id, cell_y, cell_x) draws with probability ~ value."""
        flats = [self.maps[vid].ravel() for vid in self.view_ids]
        sizes = np.array([f.size for f in flats])
        vals = np.concatenate(flats)
        p = vals / vals.sum()
        picks = rng.choice(vals.size, size=count, replace=True, p=p)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        out = []
        for pick in picks:
            vi = int(np.searchsorted(offsets, pick, side="right") - 1)
            vid = self.view_ids[vi]
            local = pick - offsets[vi]
            cols = self.maps[vid].shape[1]
            out.append((vid, int(local // cols), int(local % cols)))
        return out


def update_error_map(errmaps: ErrorMapSet, view_id, px, py, gt_probs, rendered_probs):
    """Overwrite touched cells with the current gt/render disagreement."""
    values = mask_distance(gt_probs, rendered_probs, errmaps.w, errmaps.eps)
    errmaps.overwrite(view_id, np.atleast_1d(px), np.atleast_1d(py), np.atleast_1d(values))


# ---------------------------------------------------------------------------
# precomputed ray tables


class RayTable:
    """Per-pixel rays, targets, and surface depths for the retained views.

    Everything static across iterations is materialized once: camera rays,
    bbox clip ranges, per-pixel target vectors, and (lazily) the rendered
    surface geometry used for reprojection, which depends only on the frozen
    density field.
    """

    def __init__(self, scene, cameras, targets):
        self.scene = scene
        self.cameras = list(cameras)
        self.view_ids = np.array([c.view_id for c in self.cameras], dtype=np.int64)
        sizes = [c.height * c.width for c in self.cameras]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.total = int(self.offsets[-1])
        parts_o, parts_d, parts_t0, parts_t1, parts_hit = [], [], [], [], []
        for cam in self.cameras:
            px, py = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
            o, d, t0, t1, hit = rays_for_pixels(cam, px.ravel(), py.ravel(), scene.bbox)
            parts_o.append(o)
            parts_d.append(d)
            parts_t0.append(t0)
            parts_t1.append(t1)
            parts_hit.append(hit)
        self.origins = np.concatenate(parts_o)
        self.dirs = np.concatenate(parts_d)
        self.t0 = np.concatenate(parts_t0)
        self.t1 = np.concatenate(parts_t1)
        self.hit = np.concatenate(parts_hit)
        self.targets = np.concatenate([t.reshape(sz, -1) for t, sz in zip(targets, sizes)])
        # RNG keying arrays: owning view id and within-view pixel index
        self.ray_view = np.concatenate([np.full(sz, vid, dtype=np.uint64) for vid, sz in zip(self.view_ids, sizes)])
        self.ray_pixel = np.concatenate([np.arange(sz, dtype=np.uint64) for sz in sizes])
        self._surface_t = None
        self._surface_z = None
        self._pixel_color = None

    def view_slice(self, view_index):
        return slice(int(self.offsets[view_index]), int(self.offsets[view_index + 1]))

    def index_of(self, view_index, px, py):
        cam = self.cameras[view_index]
        return self.offsets[view_index] + np.asarray(py, dtype=np.int64) * cam.width + np.asarray(px, dtype=np.int64)

    def ensure_surface(self, n_samples, opacity_threshold=0.5, batch_rays=16384):
        """Midpoint-rendered per-pixel surface data over the frozen scene.

        Fills surface_t (hit distance, 0 = empty), surface_z (z-depth of the
        hit point in the owning view), and pixel_color (composited RGB with
        background).  All of it depends only on the frozen density/color
        field, so one pass serves every iteration.
        """
        if self._surface_t is not None:
            return
        bg = np.asarray(self.scene.background_albedo, dtype=np.float64)
        t_surf = np.zeros(self.total)
        z_surf = np.zeros(self.total)
        color = np.broadcast_to(bg, (self.total, 3)).copy()
        live = np.flatnonzero(self.hit)
        for start in range(0, live.size, batch_rays):
            sel = live[start : start + batch_rays]
            t, delta = stratified_samples(self.t0[sel], self.t1[sel], n_samples, jitter=False)
            act = sample_batch(self.scene, self.origins[sel], self.dirs[sel], t, delta)
            t_surf[sel] = normalized_depth(act.composite(act.t), act.opacity, opacity_threshold)
            point_rgb = self.scene.sample_color(act.points) if act.points.size else np.zeros((0, 3))
            color[sel] = act.composite(point_rgb) + act.trans_end[:, None] * bg
        for vi, cam in enumerate(self.cameras):
            sl = self.view_slice(vi)
            ts = t_surf[sl]
            solid = ts > 0
            if solid.any():
                pts = self.origins[sl][solid] + ts[solid, None] * self.dirs[sl][solid]
                _, depths, _ = project_many(cam, pts)
                z = np.zeros(ts.shape)
                z[solid] = depths
                z_surf[sl] = z
        self._surface_t = t_surf
        self._surface_z = z_surf
        self._pixel_color = color

    @property
    def surface_t(self):
        return self._surface_t

    @property
    def surface_z(self):
        return self._surface_z

    @property
    def pixel_color(self):
        return self._pixel_color


# ---------------------------------------------------------------------------
# forward/backward blocks


def _forward_rays(scene, grid, table: RayTable, gids, iteration, cfg, jitter=True):
    """Render composited grid values for table rays.

    Returns (composited (n, D), act, coos, live) where act/coos cover only
    rays that intersect the scene box; rows for missed rays stay zero
    (uniform after softmax).
    """
    n = gids.size
    comped = np.zeros((n, grid.channels))
    live = np.flatnonzero(table.hit[gids])
    act = None
    coos = None
    if live.size:
        sel = gids[live]
        t, delta = stratified_samples(
            table.t0[sel],
            table.t1[sel],
            cfg.samples_per_ray,
            seed=cfg.seed,
            view_ids=table.ray_view[sel],
            pixel_index=table.ray_pixel[sel],
            iteration=iteration,
            jitter=jitter,
        )
        act = sample_batch(scene, table.origins[sel], table.dirs[sel], t, delta)
        vals, coos = grid.query_with_coo(act.points)
        comped[live] = act.composite(vals)
    return comped, act, coos, live


def _expand_coo(coos, per_sample, channels):
    """Per-level (flat corner idx, corner contribution) from per-sample upstream."""
    return [
        (idx.ravel(), (wts[:, :, None] * per_sample[:, None, :]).reshape(-1, channels))
        for idx, wts in coos
    ]


class _GradBatch:
    """Collects COO gradient pieces and applies them in one pass per level.

    Concatenating before the per-level scatter fixes the floating-point
    accumulation order (piece order = append order) and pays the full-size
    bin array cost once per iteration instead of once per block.
    """

    def __init__(self, grid: TrainableGrid):
        self.grid = grid
        self.idx = [[] for _ in grid.levels]
        self.contrib = [[] for _ in grid.levels]

    def add(self, act, coos, live, d_comped):
        """Queue d loss / d composited-value routed through one forward."""
        if act is None or act.ray_index.size == 0:
            return
        per_sample = act.weights[:, None] * d_comped[live][act.ray_index]
        self.add_pieces(_expand_coo(coos, per_sample, self.grid.channels))

    def add_pieces(self, pieces):
        for li, (idx, contrib) in enumerate(pieces):
            self.idx[li].append(idx)
            self.contrib[li].append(contrib)

    def apply(self):
        for li in range(len(self.grid.levels)):
            if not self.idx[li]:
                continue
            self.grid.scatter_grad_coo(li, np.concatenate(self.idx[li]), np.concatenate(self.contrib[li]))
        self.idx = [[] for _ in self.grid.levels]
        self.contrib = [[] for _ in self.grid.levels]


@dataclass
class _BlockResult:
    ce_sum: float
    grad_pieces: list  # per-level (idx, contrib), or None when no active samples
    errmap_f: np.ndarray  # per-ray disagreement values, ray order


def _mask_block(scene, grid, table, gids, iteration, cfg):
    comped, act, coos, live = _forward_rays(scene, grid, table, gids, iteration, cfg)
    probs = softmax_rows(comped)
    gt = table.targets[gids]
    ce_rows = -(gt * np.log(np.clip(probs, 1e-12, None))).sum(axis=1) / cfg.n_channels
    d_comped = (probs - gt) / (cfg.n_channels * cfg.global_batch)
    f_vals = mask_distance(gt, probs, cfg.w, cfg.eps)
    pieces = None
    if act is not None and act.ray_index.size:
        per_sample = act.weights[:, None] * d_comped[live][act.ray_index]
        pieces = _expand_coo(coos, per_sample, cfg.n_channels)
    return _BlockResult(float(ce_rows.sum()), pieces, f_vals)


# ---------------------------------------------------------------------------
# error-guided patches


def _build_patch(table: RayTable, errmaps: ErrorMapSet, cfg, rng: np.random.Generator, draw):
    """Ray ids for one error seed: unproject, reproject, window, subsample.

    Returns an int64 array of table ray ids (possibly empty when the seed
    pixel has no surface or reprojects nowhere visible).
    """
    vid, cy, cx = draw
    vi = int(np.where(table.view_ids == vid)[0][0])
    cam = table.cameras[vi]
    s = errmaps.downsample
    px = cx * s + int(rng.integers(0, min(s, cam.width - cx * s)))
    py = cy * s + int(rng.integers(0, min(s, cam.height - cy * s)))
    src = int(table.index_of(vi, px, py))
    t_surf = table.surface_t[src]
    if t_surf <= 0.0:
        return np.empty(0, dtype=np.int64)
    point = table.origins[src] + t_surf * table.dirs[src]

    half = cfg.patch_size // 2
    pieces = []
    for ovi, ocam in enumerate(table.cameras):
        pix, depth, front = project_many(ocam, point[None, :])
        if not front[0]:
            continue
        lx = int(np.floor(pix[0, 0] + 0.5))
        ly = int(np.floor(pix[0, 1] + 0.5))
        if not (0 <= lx < ocam.width and 0 <= ly < ocam.height):
            continue
        z_here = table.surface_z[table.index_of(ovi, lx, ly)]
        if z_here <= 0.0 or abs(depth[0] - z_here) > cfg.eps_vis * z_here:
            continue
        x0 = min(max(lx - half, 0), max(ocam.width - cfg.patch_size, 0))
        y0 = min(max(ly - half, 0), max(ocam.height - cfg.patch_size, 0))
        wx = min(cfg.patch_size, ocam.width)
        wy = min(cfg.patch_size, ocam.height)
        gx, gy = np.meshgrid(np.arange(x0, x0 + wx), np.arange(y0, y0 + wy))
        cand = table.index_of(ovi, gx.ravel(), gy.ravel())
        take = min(cfg.rays_per_patch, cand.size)
        pieces.append(cand[rng.choice(cand.size, size=take, replace=False)])
    if not pieces:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(pieces)


# ---------------------------------------------------------------------------
# training loops


def _run_blocks(fn, blocks, pool):
    if pool is None:
        return [fn(b) for b in blocks]
    return list(pool.map(fn, blocks))


def _check_finite(it, lo, lrgb):
    total = lo + lrgb
    if not np.isfinite(total):
        raise NanLoss(f"non-finite loss at iteration {it}: ce={lo!r} pair={lrgb!r}")
    return total


def train_object_field(scene, frames, cameras, cfg: FusionConfig, workers=1, progress=None):
    """Fit per-class identity logits on a trainable grid from 2D mask frames.

    frames and cameras run parallel (same order, same view ids).  Returns
    (grid, trace) with one (iteration, ce_loss, pair_loss, total) row per
    iteration.  Raising on non-finite losses is deliberate; nothing is
    clamped silently.
    """
    if len(frames) == 0:
        raise NoViewsRetained("no training views supplied")
    if len(frames) != len(cameras):
        raise ValidationError("frames and cameras differ in length")
    for frame, cam in zip(frames, cameras):
        if frame.view_id != cam.view_id:
            raise ValidationError(f"frame/camera view id mismatch: {frame.view_id} vs {cam.view_id}")
        if frame.probs.shape[:2] != (cam.height, cam.width):
            raise ValidationError(f"view {cam.view_id}: frame does not match camera size")
        if frame.n_channels != cfg.n_channels:
            raise ChannelMismatch(f"view {frame.view_id}: frame has {frame.n_channels} channels, config says {cfg.n_channels}")

    table = RayTable(scene, cameras, [f.probs for f in frames])
    grid = TrainableGrid.zeros(scene.bbox, cfg.n_channels, cfg.grid_levels)
    errmaps = ErrorMapSet(
        [c.view_id for c in cameras],
        [(c.height, c.width) for c in cameras],
        cfg.errmap_downsample,
        cfg.w,
        cfg.eps,
    )
    master = np.random.default_rng(cfg.seed)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    gbatch = _GradBatch(grid)
    trace = []
    needs_surface = cfg.warmup_iters < cfg.iterations
    if needs_surface:
        table.ensure_surface(cfg.samples_per_ray)

    try:
        for it in range(cfg.iterations):
            gids = master.integers(0, table.total, size=cfg.global_batch)
            blocks = [gids[i : i + BLOCK_RAYS] for i in range(0, cfg.global_batch, BLOCK_RAYS)]
            results = _run_blocks(lambda b: _mask_block(scene, grid, table, b, it, cfg), blocks, pool)

            ce_loss = 0.0
            for res in results:
                ce_loss += res.ce_sum
                if res.grad_pieces is not None:
                    gbatch.add_pieces(res.grad_pieces)
            ce_loss /= cfg.global_batch

            # error-map overwrites, in global ray order across blocks
            all_f = np.concatenate([r.errmap_f for r in results])
            order_views = table.ray_view[gids].astype(np.int64)
            px_all = (table.ray_pixel[gids]).astype(np.int64)
            for vi, cam in enumerate(table.cameras):
                sel = np.flatnonzero(order_views == cam.view_id)
                if sel.size == 0:
                    continue
                pix = px_all[sel]
                errmaps.overwrite(cam.view_id, pix % cam.width, pix // cam.width, all_f[sel])

            pair_loss = 0.0
            if it >= cfg.warmup_iters:
                draws = errmaps.draw(master, cfg.error_points)
                patches = []
                for draw in draws:
                    rp = _build_patch(table, errmaps, cfg, master, draw)
                    if rp.size:
                        patches.append(rp)
                if patches:
                    scale = 1.0 / len(patches)
                    rp_all = np.concatenate(patches)
                    comped, act, coos, live = _forward_rays(scene, grid, table, rp_all, it, cfg)
                    probs = softmax_rows(comped)
                    colors = table.pixel_color[rp_all]
                    dprobs_all = np.zeros_like(probs)
                    start = 0
                    for rp in patches:
                        stop = start + rp.size
                        loss_p, dprobs, _ = ray_pair_rgb_loss(
                            colors[start:stop], probs[start:stop], cfg, master
                        )
                        pair_loss += loss_p * scale
                        dprobs_all[start:stop] = dprobs * scale
                        start = stop
                    if np.any(dprobs_all):
                        d_comped = softmax_backward(probs, dprobs_all)
                        gbatch.add(act, coos, live, d_comped)

            total = _check_finite(it, ce_loss, pair_loss)
            gbatch.apply()
            grid.adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            trace.append((it, ce_loss, pair_loss, total))
            if progress is not None:
                progress(it, ce_loss, pair_loss)

            if (it + 1) % cfg.errmap_full_update_every == 0:
                full_error_map_update(scene, grid, table, errmaps, cfg)
    finally:
        if pool is not None:
            pool.shutdown()
    return grid, trace


def full_error_map_update(scene, grid, table: RayTable, errmaps: ErrorMapSet, cfg):
    """Recompute every cell from a midpoint-sampled ray at its center pixel."""
    for vi, cam in enumerate(table.cameras):
        px, py = errmaps.cell_center_pixels(cam.view_id, cam.height, cam.width)
        gids = table.index_of(vi, px, py)
        comped, _, _, _ = _forward_rays(scene, grid, table, gids, 0, cfg, jitter=False)
        probs = softmax_rows(comped)
        f = mask_distance(table.targets[gids], probs, cfg.w, cfg.eps)
        errmaps.set_view(cam.view_id, f)


def distill_feature_field(scene, feature_frames, cameras, cfg: FusionConfig, workers=1):
    """Fit feature channels on a trainable grid by mean squared error.

    Same render/backward machinery as mask training, minus the softmax and
    the color loss.  Returns (grid, trace) with (iteration, mse) rows.
    """
    if len(feature_frames) == 0:
        raise NoViewsRetained("no feature views supplied")
    channels = feature_frames[0].n_channels
    for fr in feature_frames:
        if fr.n_channels != channels:
            raise ChannelMismatch(f"view {fr.view_id}: {fr.n_channels} channels, expected {channels}")

    table = RayTable(scene, cameras, [f.values for f in feature_frames])
    grid = TrainableGrid.zeros(scene.bbox, channels, cfg.grid_levels)
    master = np.random.default_rng(cfg.seed)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    gbatch = _GradBatch(grid)
    trace = []

    def block_fn(args):
        it, gids = args
        comped, act, coos, live = _forward_rays(scene, grid, table, gids, it, cfg)
        diff = comped - table.targets[gids]
        upstream = 2.0 * diff / cfg.global_batch
        pieces = None
        if act is not None and act.ray_index.size:
            per_sample = act.weights[:, None] * upstream[live][act.ray_index]
            pieces = _expand_coo(coos, per_sample, channels)
        return float((diff * diff).sum()), pieces

    try:
        for it in range(cfg.iterations):
            gids = master.integers(0, table.total, size=cfg.global_batch)
            blocks = [(it, gids[i : i + BLOCK_RAYS]) for i in range(0, cfg.global_batch, BLOCK_RAYS)]
            results = _run_blocks(block_fn, blocks, pool)
            mse = 0.0
            for sq_sum, pieces in results:
                mse += sq_sum
                if pieces is not None:
                    gbatch.add_pieces(pieces)
            mse /= cfg.global_batch
            gbatch.apply()
            if not np.isfinite(mse):
                raise NanLoss(f"non-finite feature loss at iteration {it}")
            grid.adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            trace.append((it, mse))
    finally:
        if pool is not None:
            pool.shutdown()
    return grid, trace
