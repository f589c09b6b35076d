"""Cameras, rays, 2D<->3D projection, and prompt propagation.

Conventions
-----------
* ``cam_to_world`` is a 4x4 rigid transform; its rotation block must be
  orthonormal.  Two handednesses are supported: ``OPENGL_NEG_Z`` (x right,
  y up, camera looks down -z) and ``OPENCV_POS_Z`` (x right, y down, camera
  looks down +z).
* A continuous pixel coordinate ``(px, py)`` addresses the point
  ``(px + 0.5, py + 0.5)`` on the image plane, so integer pixel ``(0, 0)``
  shoots through the center of the top-left pixel.
* ``depth`` is always z-depth in the camera frame, not euclidean distance
  along the ray.  ``project`` and ``unproject`` are exact inverses under
  this convention.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import BehindCamera, NonPositiveDepth, NoViewsRetained, RayMissesBbox, ValidationError

MIN_T_NEAR = 1e-4


class Convention(Enum):
    OPENGL_NEG_Z = "OPENGL_NEG_Z"
    OPENCV_POS_Z = "OPENCV_POS_Z"


@dataclass(frozen=True)
class Camera:
    view_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (4, 4)
    convention: Convention = Convention.OPENGL_NEG_Z

    def __post_init__(self):
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError(f"cam_to_world must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValidationError(f"view {self.view_id}: rotation block is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"view {self.view_id}: fx, fy must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"view {self.view_id}: principal point outside image")
        m.setflags(write=False)
        object.__setattr__(self, "cam_to_world", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    # Sign of the camera-frame axis pointing into the scene.
    @property
    def _zsign(self) -> float:
        return -1.0 if self.convention is Convention.OPENGL_NEG_Z else 1.0

    def pixel_dirs_cam(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Unnormalized camera-frame directions through pixel centers, |z| = 1."""
        x = (np.asarray(px, dtype=np.float64) + 0.5 - self.cx) / self.fx
        y = (np.asarray(py, dtype=np.float64) + 0.5 - self.cy) / self.fy
        zs = self._zsign
        return np.stack([x, zs * y, zs * np.ones_like(x)], axis=-1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit norm
    view_id: int
    pixel: tuple[float, float]
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValidationError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValidationError(f"bad ray range [{self.t_near}, {self.t_far}]")

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


@dataclass(frozen=True)
class Prompt3D:
    position: np.ndarray  # (3,)
    object_id: int
    polarity: str = "positive"  # or "negative"

    def __post_init__(self):
        if self.object_id < 1:
            raise ValidationError("object_id must address an identity channel >= 1")
        if self.polarity not in ("positive", "negative"):
            raise ValidationError(f"bad polarity {self.polarity!r}")


def intersect_aabb(origin: np.ndarray, direction: np.ndarray, bbox: np.ndarray):
    """Slab intersection of rays with an axis-aligned box.

    origin, direction: (..., 3); bbox: (2, 3) [min, max].
    Returns (t0, t1, hit) with t0 clipped to MIN_T_NEAR.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        lo = (bbox[0] - origin) * inv
        hi = (bbox[1] - origin) * inv
    # Parallel-to-slab components produce +-inf or nan (origin on the slab plane)
    near = np.where(np.isnan(lo), -np.inf, np.minimum(lo, hi))
    far = np.where(np.isnan(hi), np.inf, np.maximum(lo, hi))
    t0 = np.maximum(near.max(axis=-1), MIN_T_NEAR)
    t1 = far.min(axis=-1)
    return t0, t1, t0 < t1


def ray_for_pixel(camera: Camera, pixel: tuple[float, float], bbox: np.ndarray) -> Ray:
    """Ray through a pixel center, with its t-range clipped to the scene box."""
    px, py = pixel
    if not (-0.5 <= px <= camera.width - 0.5 and -0.5 <= py <= camera.height - 0.5):
        raise ValidationError(f"pixel {pixel} outside image bounds")
    bbox = np.asarray(bbox, dtype=np.float64)
    if not np.all(bbox[1] > bbox[0]):
        raise ValidationError("degenerate bbox")
    d_cam = camera.pixel_dirs_cam(np.float64(px), np.float64(py))
    d_world = camera.rotation @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    t0, t1, hit = intersect_aabb(camera.origin, d_world, bbox)
    if not hit:
        raise RayMissesBbox(f"pixel {pixel} of view {camera.view_id} misses the scene box")
    return Ray(camera.origin.copy(), d_world, camera.view_id, (float(px), float(py)), float(t0), float(t1))


def rays_for_pixels(camera: Camera, px: np.ndarray, py: np.ndarray, bbox: np.ndarray):
    """Vectorized ray generation.

    Returns (origins, dirs, t0, t1, hit); rays that miss the box are flagged
    rather than raised.
    """
    d_cam = camera.pixel_dirs_cam(px, py)
    d_world = d_cam @ camera.rotation.T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, d_world.shape)
    t0, t1, hit = intersect_aabb(origins, d_world, np.asarray(bbox, dtype=np.float64))
    return origins, d_world, t0, np.where(hit, t1, t0 + 1.0), hit


def project(camera: Camera, point: np.ndarray) -> tuple[tuple[float, float], float]:
    """World point -> (continuous pixel, z-depth).  Raises BEHIND_CAMERA."""
    pix, depth, ok = project_many(camera, np.asarray(point, dtype=np.float64)[None, :])
    if not ok[0]:
        raise BehindCamera(f"point {point} has non-positive depth in view {camera.view_id}")
    return (float(pix[0, 0]), float(pix[0, 1])), float(depth[0])


def project_many(camera: Camera, points: np.ndarray):
    """Vectorized projection; returns (pixels (N,2), depths (N,), in_front (N,))."""
    p_cam = (points - camera.origin) @ camera.rotation
    zs = camera._zsign
    depth = zs * p_cam[:, 2]
    ok = depth > 0
    safe = np.where(ok, depth, 1.0)
    px = camera.fx * (p_cam[:, 0] / safe) + camera.cx - 0.5
    py = camera.fy * (zs * p_cam[:, 1] / safe) + camera.cy - 0.5
    return np.stack([px, py], axis=1), depth, ok


def unproject(camera: Camera, pixel: tuple[float, float], depth: float) -> np.ndarray:
    """(pixel, z-depth) -> world point; exact inverse of project."""
    if np.ndim(depth) == 0:
        if depth <= 0:
            raise NonPositiveDepth(f"depth {depth} must be positive")
        d_cam = camera.pixel_dirs_cam(np.float64(pixel[0]), np.float64(pixel[1]))
        return camera.origin + (camera.rotation @ d_cam) * float(depth)
    px = np.asarray(pixel[0], dtype=np.float64)
    py = np.asarray(pixel[1], dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("all depths must be positive")
    d_cam = camera.pixel_dirs_cam(px, py)
    return camera.origin + (d_cam @ camera.rotation.T) * depth[..., None]


def in_bounds(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    return (
        (pixels[..., 0] >= -0.5)
        & (pixels[..., 0] <= camera.width - 0.5)
        & (pixels[..., 1] >= -0.5)
        & (pixels[..., 1] <= camera.height - 0.5)
    )


# depth_fn(camera, pixels (N,2)) -> z-depths (N,); 0 marks an empty ray.
DepthFn = Callable[[Camera, np.ndarray], np.ndarray]


def propagate_prompts(
    prompts: Sequence[Prompt3D],
    cameras: Sequence[Camera],
    depth_fn: DepthFn,
    eps_vis: float = 0.05,
):
    """Project 3D prompts into every view and flag their visibility.

    A prompt is visible in a view when it projects in-bounds with positive
    depth and the rendered depth at that pixel agrees with the prompt depth
    within a relative tolerance eps_vis.  Rendered depth 0 (empty ray) is
    never visible.  Invisible prompts are flagged, not dropped.

    Returns one list per camera of (pixel, object_id, polarity, visible).
    """
    pts = np.array([p.position for p in prompts], dtype=np.float64).reshape(-1, 3)
    out = []
    for cam in cameras:
        pixels, depths, in_front = project_many(cam, pts)
        ok = in_front & in_bounds(cam, pixels)
        visible = np.zeros(len(pts), dtype=bool)
        if ok.any():
            rendered = depth_fn(cam, pixels[ok])
            agree = (rendered > 0) & (np.abs(rendered - depths[ok]) <= eps_vis * depths[ok])
            visible[np.flatnonzero(ok)] = agree
        out.append(
            [
                ((float(pixels[i, 0]), float(pixels[i, 1])), prompts[i].object_id, prompts[i].polarity, bool(visible[i]))
                for i in range(len(pts))
            ]
        )
    return out


def filter_views(per_view_visibility, k_min: int = 1) -> list[int]:
    """Indices of views that see at least k_min prompts."""
    if k_min < 1:
        raise ValidationError("k_min must be >= 1")
    retained = [v for v, entries in enumerate(per_view_visibility) if sum(1 for e in entries if e[3]) >= k_min]
    if not retained:
        raise NoViewsRetained(f"no view sees >= {k_min} prompts")
    return retained


# ---------------------------------------------------------------------------
# cameras.json / prompts.json


def save_cameras(path, cameras: Sequence[Camera]):
    conv = cameras[0].convention
    doc = {
        "convention": conv.value,
        "views": [
            {
                "id": c.view_id,
                "width": c.width,
                "height": c.height,
                "fx": c.fx,
                "fy": c.fy,
                "cx": c.cx,
                "cy": c.cy,
                "cam_to_world": [float(x) for x in c.cam_to_world.reshape(-1)],
            }
            for c in cameras
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_cameras(path) -> list[Camera]:
    with open(path) as f:
        doc = json.load(f)
    try:
        conv = Convention(doc["convention"])
        return [
            Camera(
                view_id=int(v["id"]),
                width=int(v["width"]),
                height=int(v["height"]),
                fx=float(v["fx"]),
                fy=float(v["fy"]),
                cx=float(v["cx"]),
                cy=float(v["cy"]),
                cam_to_world=np.array(v["cam_to_world"], dtype=np.float64).reshape(4, 4),
                convention=conv,
            )
            for v in doc["views"]
        ]
    except (KeyError, ValueError) as e:
        raise ValidationError(f"bad cameras file {path}: {e}") from e


def load_prompts(path, cameras: Sequence[Camera] | None = None, depth_fn: DepthFn | None = None) -> list[Prompt3D]:
    """Load prompts.json.

    3D entries carry "xyz".  2D entries carry ("view_id", "pixel") and are
    lifted to 3D through the rendered depth at that pixel, which requires
    cameras and a depth_fn.
    """
    with open(path) as f:
        doc = json.load(f)
    by_id = {c.view_id: c for c in cameras} if cameras else {}
    prompts = []
    for entry in doc["prompts"]:
        oid = int(entry["object_id"])
        pol = entry.get("polarity", "positive")
        if "xyz" in entry:
            prompts.append(Prompt3D(np.array(entry["xyz"], dtype=np.float64), oid, pol))
            continue
        if depth_fn is None or not by_id:
            raise ValidationError("2D prompt entries need cameras and a depth function to lift")
        cam = by_id.get(int(entry["view_id"]))
        if cam is None:
            raise ValidationError(f"prompt references unknown view {entry['view_id']}")
        pixel = np.asarray(entry["pixel"], dtype=np.float64)
        depth = float(depth_fn(cam, pixel[None, :])[0])
        if depth <= 0:
            raise ValidationError(f"prompt at {entry['pixel']} in view {cam.view_id} hits empty space")
        prompts.append(Prompt3D(unproject(cam, (pixel[0], pixel[1]), depth), oid, pol))
    return prompts
