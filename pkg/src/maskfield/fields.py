"""Scene fields (density, color, 3D labels) and the trainable vector grid.

The density/color scene is frozen; only the vector grid trains.  Analytic
scenes build density from signed distance: a C1 smoothstep ramps from 0 at
sdf = +softness to sigma_max at sdf = -softness, so a point exactly on a
surface sits at sigma_max / 2 and boundary sharpness is controlled per
primitive.

The trainable grid is a sum of dense trilinear levels (no hashing, no MLP),
which keeps queries, adjoints, and the optimizer closed-form.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadMagic, DimMismatch, Unsupported, ValidationError

VOL_MAGIC = b"SNHQVOL1"


# ---------------------------------------------------------------------------
# analytic primitives


@dataclass(frozen=True)
class Primitive:
    shape: str  # "sphere" | "box"
    object_id: int
    albedo: tuple[float, float, float]
    softness: float
    center: np.ndarray | None = None  # sphere
    radius: float = 0.0  # sphere
    min: np.ndarray | None = None  # box
    max: np.ndarray | None = None  # box

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.shape == "sphere":
            d = p - self.center
            return np.sqrt(np.einsum("...i,...i->...", d, d)) - self.radius
        half = (self.max - self.min) * 0.5
        q = np.abs(p - (self.min + half)) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


def _smoothstep01(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass(frozen=True)
class DensityColorScene:
    """Queryable sigma(x) and c(x, d) plus ground-truth 3D object labels.

    Backed either by analytic primitives or by loaded voxel volumes.
    """

    bbox: np.ndarray  # (2, 3)
    primitives: tuple[Primitive, ...] = ()
    sigma_max: float = 200.0
    background_albedo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # loaded-grid backing (all-or-nothing for density+albedo; labels optional)
    grid_density: np.ndarray | None = None  # (dx, dy, dz)
    grid_albedo: np.ndarray | None = None  # (dx, dy, dz, 3)
    grid_labels: np.ndarray | None = None  # (dx, dy, dz) integer ids

    def __post_init__(self):
        bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if not np.all(bbox[1] > bbox[0]):
            raise ValidationError("scene bbox is degenerate")
        object.__setattr__(self, "bbox", bbox)
        ids = sorted(self.primitives, key=lambda pr: pr.object_id)
        object.__setattr__(self, "primitives", tuple(ids))
        for pr in self.primitives:
            if pr.object_id < 1:
                raise ValidationError("primitive object_id must be >= 1 (0 is background)")
            if pr.softness <= 0:
                raise ValidationError("primitive softness must be positive")

    @property
    def analytic(self) -> bool:
        return self.grid_density is None

    @property
    def extent(self) -> float:
        return float(np.max(self.bbox[1] - self.bbox[0]))

    def _inside(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.bbox[0]) & (points <= self.bbox[1]), axis=-1)

    def _sdf_stack(self, points: np.ndarray) -> np.ndarray:
        # (n_prims, N); primitives are kept sorted by object_id so argmin
        # tie-breaks toward the lower id.
        return np.stack([pr.sdf(points) for pr in self.primitives], axis=0)

    def sample_density(self, points: np.ndarray) -> np.ndarray:
        """sigma at world points; 0 outside the scene box."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not self.analytic:
            sig = _trilinear_volume(self.grid_density, self.bbox, points)
            return np.where(self._inside(points), np.maximum(sig, 0.0), 0.0)
        if not self.primitives:
            return np.zeros(points.shape[0])
        sd = self._sdf_stack(points)
        soft = np.array([pr.softness for pr in self.primitives])[:, None]
        occ = _smoothstep01((soft - sd) / (2.0 * soft)).max(axis=0)
        sig = np.clip(self.sigma_max * occ, 0.0, self.sigma_max)
        return np.where(self._inside(points), sig, 0.0)

    def sample_color(self, points: np.ndarray, directions: np.ndarray | None = None) -> np.ndarray:
        """Albedo of the closest primitive; background outside every support."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        bg = np.asarray(self.background_albedo, dtype=np.float64)
        if not self.analytic:
            alb = _trilinear_volume(self.grid_albedo, self.bbox, points)
            return np.where(self._inside(points)[:, None], alb, bg)
        out = np.broadcast_to(bg, (points.shape[0], 3)).copy()
        if not self.primitives:
            return out
        sd = self._sdf_stack(points)
        near = sd.argmin(axis=0)
        soft = np.array([pr.softness for pr in self.primitives])
        albedos = np.array([pr.albedo for pr in self.primitives])
        hit = sd[near, np.arange(points.shape[0])] < soft[near]
        out[hit] = albedos[near[hit]]
        return out

    def gt_label(self, points: np.ndarray) -> np.ndarray:
        """Ground-truth object id at world points (0 = background)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not self.analytic:
            if self.grid_labels is None:
                raise Unsupported("loaded scene has no label volume")
            return _nearest_volume(self.grid_labels, self.bbox, points)
        if not self.primitives:
            return np.zeros(points.shape[0], dtype=np.int64)
        sd = self._sdf_stack(points)
        near = sd.argmin(axis=0)
        ids = np.array([pr.object_id for pr in self.primitives], dtype=np.int64)
        soft = np.array([pr.softness for pr in self.primitives])
        # a point belongs to a primitive anywhere its density is nonzero,
        # matching sample_color; depth-rendered surface points land in the
        # soft shell just outside sdf = 0, never strictly inside
        inside = sd[near, np.arange(points.shape[0])] < soft[near]
        return np.where(inside, ids[near], 0)

    def num_labels(self) -> int:
        """Channel count L = background + highest object id."""
        if self.analytic:
            top = max((pr.object_id for pr in self.primitives), default=0)
        elif self.grid_labels is not None:
            top = int(self.grid_labels.max())
        else:
            top = 0
        return top + 1

    def influence_spheres(self):
        """Conservative per-primitive bounds on where density can be nonzero.

        Returns (centers (P, 3), radii (P,)) such that sigma is exactly 0
        outside every sphere, or None when no such bound exists (loaded
        volumes).  Used to skip density evaluation in empty space; the cull
        is conservative, so results are bit-identical with or without it.
        """
        if not self.analytic:
            return None
        margin = 1e-6  # dwarfs any rounding in the ray/sphere quadratic
        centers = []
        radii = []
        for pr in self.primitives:
            if pr.shape == "sphere":
                centers.append(pr.center)
                radii.append(pr.radius + pr.softness + margin)
            else:
                half = (pr.max - pr.min) * 0.5
                centers.append(pr.min + half)
                radii.append(float(np.linalg.norm(half)) + pr.softness + margin)
        if not centers:
            return np.zeros((0, 3)), np.zeros(0)
        return np.asarray(centers), np.asarray(radii)


def _volume_coords(shape3, bbox, points):
    rel = (points - bbox[0]) / (bbox[1] - bbox[0])
    return rel * (np.asarray(shape3, dtype=np.float64) - 1.0)


def _trilinear_volume(vol: np.ndarray, bbox: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a dense volume indexed [x, y, z, ...]."""
    u = _volume_coords(vol.shape[:3], bbox, points)
    u = np.clip(u, 0.0, np.asarray(vol.shape[:3]) - 1.0)
    i0 = np.minimum(u.astype(np.int64), np.asarray(vol.shape[:3]) - 2)
    i0 = np.maximum(i0, 0)
    f = u - i0
    out = 0.0
    for corner in range(8):
        ox, oy, oz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
        w = (
            (f[:, 0] if ox else 1.0 - f[:, 0])
            * (f[:, 1] if oy else 1.0 - f[:, 1])
            * (f[:, 2] if oz else 1.0 - f[:, 2])
        )
        v = vol[i0[:, 0] + ox, i0[:, 1] + oy, i0[:, 2] + oz]
        out = out + (w[:, None] * v if v.ndim > 1 else w * v)
    return out


def _nearest_volume(vol: np.ndarray, bbox: np.ndarray, points: np.ndarray) -> np.ndarray:
    u = _volume_coords(vol.shape[:3], bbox, points)
    i = np.clip(np.rint(u).astype(np.int64), 0, np.asarray(vol.shape[:3]) - 1)
    return vol[i[:, 0], i[:, 1], i[:, 2]]


# ---------------------------------------------------------------------------
# trainable multilevel trilinear grid


@dataclass
class GridLevel:
    resolution: int  # cells per axis; corners are (resolution + 1)^3
    values: np.ndarray  # (n_corners, D)
    grad: np.ndarray  # same shape

    @property
    def n_side(self) -> int:
        return self.resolution + 1


@dataclass
class TrainableGrid:
    """Sum of dense trilinear voxel levels with gradient accumulators.

    D = L identity logits for the object field, D = C channels for the
    feature field.  Queries outside the bbox clamp to the boundary cell.
    """

    bbox: np.ndarray
    channels: int
    levels: list[GridLevel]
    adam_m: list[np.ndarray] = field(default_factory=list)
    adam_v: list[np.ndarray] = field(default_factory=list)
    adam_step_count: int = 0
    # rows that have ever received gradient, per level; rows outside this set
    # provably have m = v = 0 and unchanged values under Adam, so steps skip them
    touched: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros(cls, bbox, channels: int, resolutions: Sequence[int] = (32, 128), dtype=np.float64) -> "TrainableGrid":
        bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        levels = []
        for r in resolutions:
            n = (r + 1) ** 3
            levels.append(GridLevel(r, np.zeros((n, channels), dtype=dtype), np.zeros((n, channels), dtype=dtype)))
        g = cls(bbox=bbox, channels=channels, levels=levels)
        g.adam_m = [np.zeros_like(l.values) for l in levels]
        g.adam_v = [np.zeros_like(l.values) for l in levels]
        g.touched = [np.zeros(l.values.shape[0], dtype=bool) for l in levels]
        return g

    def corner_weights(self, points: np.ndarray, level: int):
        """Flat corner indices (N, 8) and trilinear weights (N, 8) for a level."""
        lv = self.levels[level]
        r = lv.resolution
        u = (points - self.bbox[0]) / (self.bbox[1] - self.bbox[0]) * r
        u = np.clip(u, 0.0, float(r))
        i0 = np.minimum(u.astype(np.int64), r - 1)
        f = u - i0
        n = lv.n_side
        base = (i0[:, 0] * n + i0[:, 1]) * n + i0[:, 2]
        idx = np.empty((points.shape[0], 8), dtype=np.int64)
        wts = np.empty((points.shape[0], 8), dtype=points.dtype)
        for corner in range(8):
            ox, oy, oz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
            idx[:, corner] = base + (ox * n + oy) * n + oz
            wts[:, corner] = (
                (f[:, 0] if ox else 1.0 - f[:, 0])
                * (f[:, 1] if oy else 1.0 - f[:, 1])
                * (f[:, 2] if oz else 1.0 - f[:, 2])
            )
        return idx, wts

    def query(self, points: np.ndarray) -> np.ndarray:
        """Sum over levels of trilinear interpolation at world points."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.zeros((points.shape[0], self.channels))
        for li in range(len(self.levels)):
            idx, wts = self.corner_weights(points, li)
            vals = self.levels[li].values
            for corner in range(8):
                out += vals[idx[:, corner]] * wts[:, corner, None]
        return out

    def query_with_coo(self, points: np.ndarray):
        """Like query, but also returns per-level (indices, weights) for reuse
        by scatter_coo, so backward skips recomputing the interpolation."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.zeros((points.shape[0], self.channels))
        coos = []
        for li in range(len(self.levels)):
            idx, wts = self.corner_weights(points, li)
            vals = self.levels[li].values
            for corner in range(8):
                out += vals[idx[:, corner]] * wts[:, corner, None]
            coos.append((idx, wts))
        return out, coos

    def scatter_coo(self, coos, upstream: np.ndarray):
        """Adjoint of query via cached corner data from query_with_coo."""
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        for li, (idx, wts) in enumerate(coos):
            self.scatter_grad_coo(li, idx.ravel(), (wts[:, :, None] * upstream[:, None, :]).reshape(-1, self.channels))

    def scatter_grad(self, points: np.ndarray, upstream: np.ndarray):
        """Accumulate d(loss)/d(values): exact adjoint of query."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        _, coos = self.query_with_coo(points)
        self.scatter_coo(coos, upstream)

    def scatter_grad_coo(self, level: int, flat_idx: np.ndarray, contributions: np.ndarray):
        """Add COO contributions (index order fixed by the caller) to one level."""
        lv = self.levels[level]
        n = lv.values.shape[0]
        for ch in range(self.channels):
            lv.grad[:, ch] += np.bincount(flat_idx, weights=contributions[:, ch], minlength=n)
        self.touched[level][flat_idx] = True

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        """Standard Adam with bias correction; zeroes the accumulators."""
        self.adam_step_count += 1
        t = self.adam_step_count
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for li, lv in enumerate(self.levels):
            rows = np.flatnonzero(self.touched[li])
            if rows.size == 0:
                continue
            g = lv.grad[rows]
            m = self.adam_m[li][rows]
            v = self.adam_v[li][rows]
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * (g * g)
            self.adam_m[li][rows] = m
            self.adam_v[li][rows] = v
            lv.values[rows] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            lv.grad[rows] = 0.0

    def zero_grad(self):
        for lv in self.levels:
            lv.grad[:] = 0.0

    def copy(self) -> "TrainableGrid":
        g = TrainableGrid(
            bbox=self.bbox.copy(),
            channels=self.channels,
            levels=[GridLevel(l.resolution, l.values.copy(), l.grad.copy()) for l in self.levels],
        )
        g.adam_m = [a.copy() for a in self.adam_m]
        g.adam_v = [a.copy() for a in self.adam_v]
        g.adam_step_count = self.adam_step_count
        g.touched = [t.copy() for t in self.touched]
        return g


# ---------------------------------------------------------------------------
# SNHQVOL1 volume file: magic(8) | u32 dx,dy,dz | f64 bbox min+max | u32 C |
# f32 LE payload, channel-planar, x fastest within each channel.


def save_volume(path, array: np.ndarray, bbox: np.ndarray):
    """array: (dx, dy, dz) or (dx, dy, dz, C)."""
    a = np.asarray(array)
    if a.ndim == 3:
        a = a[..., None]
    dx, dy, dz, ch = a.shape
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    payload = np.ascontiguousarray(a.transpose(3, 2, 1, 0), dtype="<f4")
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<III", dx, dy, dz))
        f.write(struct.pack("<6d", *bbox.reshape(-1)))
        f.write(struct.pack("<I", ch))
        f.write(payload.tobytes())


def load_volume(path):
    """Returns (array (dx, dy, dz, C), bbox (2, 3))."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != VOL_MAGIC:
        raise BadMagic(f"{path}: not a {VOL_MAGIC.decode()} file")
    dx, dy, dz = struct.unpack_from("<III", raw, 8)
    bbox = np.array(struct.unpack_from("<6d", raw, 20)).reshape(2, 3)
    (ch,) = struct.unpack_from("<I", raw, 68)
    expect = dx * dy * dz * ch * 4
    body = raw[72:]
    if len(body) != expect:
        raise DimMismatch(f"{path}: payload is {len(body)} bytes, header implies {expect}")
    a = np.frombuffer(body, dtype="<f4").reshape(ch, dz, dy, dx)
    return np.ascontiguousarray(a.transpose(3, 2, 1, 0), dtype=np.float64), bbox


def save_grid(path_prefix, grid: TrainableGrid):
    """One SNHQVOL1 file per level: <prefix>_level{i}.snhqvol (corner arrays)."""
    paths = []
    for li, lv in enumerate(grid.levels):
        n = lv.n_side
        path = f"{path_prefix}_level{li}.snhqvol"
        save_volume(path, lv.values.reshape(n, n, n, grid.channels), grid.bbox)
        paths.append(path)
    return paths


def load_grid(path_prefix, n_levels: int) -> TrainableGrid:
    levels = []
    bbox = None
    channels = None
    for li in range(n_levels):
        arr, bbox = load_volume(f"{path_prefix}_level{li}.snhqvol")
        n = arr.shape[0]
        channels = arr.shape[3]
        vals = arr.reshape(n**3, channels)
        levels.append(GridLevel(n - 1, vals, np.zeros_like(vals)))
    g = TrainableGrid(bbox=bbox, channels=channels, levels=levels)
    g.adam_m = [np.zeros_like(l.values) for l in levels]
    g.adam_v = [np.zeros_like(l.values) for l in levels]
    g.touched = [np.zeros(l.values.shape[0], dtype=bool) for l in levels]
    return g


# ---------------------------------------------------------------------------
# scene.json


def scene_to_dict(scene: DensityColorScene) -> dict:
    prims = []
    for pr in scene.primitives:
        d = {"object_id": pr.object_id, "albedo": list(pr.albedo), "softness": pr.softness}
        if pr.shape == "sphere":
            d["shape"] = {"sphere": {"center": list(map(float, pr.center)), "radius": pr.radius}}
        else:
            d["shape"] = {"box": {"min": list(map(float, pr.min)), "max": list(map(float, pr.max))}}
        prims.append(d)
    return {
        "bbox": {"min": list(map(float, scene.bbox[0])), "max": list(map(float, scene.bbox[1]))},
        "sigma_max": scene.sigma_max,
        "background_albedo": list(scene.background_albedo),
        "primitives": prims,
    }


def save_scene(path, scene: DensityColorScene):
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=1)


def load_scene(path) -> DensityColorScene:
    with open(path) as f:
        doc = json.load(f)
    try:
        prims = []
        for d in doc.get("primitives", []):
            shape = d["shape"]
            common = dict(
                object_id=int(d["object_id"]),
                albedo=tuple(d["albedo"]),
                softness=float(d["softness"]),
            )
            if "sphere" in shape:
                s = shape["sphere"]
                prims.append(
                    Primitive(shape="sphere", center=np.array(s["center"], dtype=np.float64), radius=float(s["radius"]), **common)
                )
            elif "box" in shape:
                b = shape["box"]
                prims.append(
                    Primitive(shape="box", min=np.array(b["min"], dtype=np.float64), max=np.array(b["max"], dtype=np.float64), **common)
                )
            else:
                raise ValidationError(f"unknown primitive shape {list(shape)}")
        return DensityColorScene(
            bbox=np.array([doc["bbox"]["min"], doc["bbox"]["max"]], dtype=np.float64),
            primitives=tuple(prims),
            sigma_max=float(doc.get("sigma_max", 200.0)),
            background_albedo=tuple(doc.get("background_albedo", (0.0, 0.0, 0.0))),
        )
    except KeyError as e:
        raise ValidationError(f"bad scene file {path}: missing {e}") from e


def load_volume_scene(density_path, albedo_path=None, labels_path=None) -> DensityColorScene:
    """Build a scene from SNHQVOL1 volumes instead of analytic primitives."""
    density, bbox = load_volume(density_path)
    density = density[..., 0]
    albedo = None
    labels = None
    if albedo_path is not None:
        albedo, abox = load_volume(albedo_path)
        if albedo.shape[3] != 3 or albedo.shape[:3] != density.shape:
            raise DimMismatch("albedo volume does not match density volume")
    if labels_path is not None:
        lab, _ = load_volume(labels_path)
        labels = np.rint(lab[..., 0]).astype(np.int64)
        if labels.shape != density.shape:
            raise DimMismatch("label volume does not match density volume")
    if albedo is None:
        albedo = np.zeros(density.shape + (3,))
    return DensityColorScene(
        bbox=bbox,
        sigma_max=float(density.max(initial=0.0)),
        grid_density=density,
        grid_albedo=albedo,
        grid_labels=labels,
    )
