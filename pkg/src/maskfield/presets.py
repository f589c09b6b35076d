"""Canonical synthetic scenes and camera rigs used by tests, demos, and docs.

Nothing here is required by the engine; these are convenient, deterministic
fixtures: a two-sphere scene for segmentation runs, an opaque box for
feature distillation, and orbiting camera rings.
"""

from __future__ import annotations

import numpy as np

from .fields import DensityColorScene, Primitive
from .geometry import Camera, Convention


def look_at_camera(
    position,
    target=(0.0, 0.0, 0.0),
    up=(0.0, 0.0, 1.0),
    width=100,
    height=100,
    focal=90.0,
    view_id=0,
    convention=Convention.OPENGL_NEG_Z,
) -> Camera:
    """Camera at position looking at target; +z world axis as default up."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, forward)
    zsign = -1.0 if convention == Convention.OPENGL_NEG_Z else 1.0
    rot = np.stack([right, zsign * true_up, zsign * forward], axis=1)
    mat = np.eye(4)
    mat[:3, :3] = rot
    mat[:3, 3] = position
    return Camera(
        view_id=view_id,
        width=width,
        height=height,
        fx=focal,
        fy=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        cam_to_world=mat,
        convention=convention,
    )


def orbit_cameras(
    n,
    radius=2.8,
    elevations_deg=(-20.0, 10.0, 35.0),
    width=100,
    height=100,
    focal=90.0,
    start_id=0,
    phase=0.0,
    convention=Convention.OPENGL_NEG_Z,
):
    """n cameras on a circle around the origin, cycling through elevations."""
    cams = []
    for i in range(n):
        theta = phase + 2.0 * np.pi * i / n
        phi = np.deg2rad(elevations_deg[i % len(elevations_deg)])
        pos = radius * np.array([np.cos(theta) * np.cos(phi), np.sin(theta) * np.cos(phi), np.sin(phi)])
        cams.append(
            look_at_camera(pos, width=width, height=height, focal=focal, view_id=start_id + i, convention=convention)
        )
    return cams


def two_sphere_scene(softness=0.02, sigma_max=400.0) -> DensityColorScene:
    """Two well-separated opaque spheres with saturated, distinct colors."""
    return DensityColorScene(
        bbox=np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
        primitives=(
            Primitive(
                shape="sphere",
                object_id=1,
                albedo=(0.85, 0.15, 0.12),
                softness=softness,
                center=np.array([-0.42, -0.05, 0.0]),
                radius=0.4,
            ),
            Primitive(
                shape="sphere",
                object_id=2,
                albedo=(0.12, 0.35, 0.88),
                softness=softness,
                center=np.array([0.48, 0.12, 0.08]),
                radius=0.32,
            ),
        ),
        sigma_max=sigma_max,
        background_albedo=(0.04, 0.04, 0.05),
    )


def opaque_box_scene(softness=0.02, sigma_max=400.0) -> DensityColorScene:
    """A single solid box; the distillation fixture."""
    return DensityColorScene(
        bbox=np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
        primitives=(
            Primitive(
                shape="box",
                object_id=1,
                albedo=(0.7, 0.6, 0.2),
                softness=softness,
                min=np.array([-0.45, -0.45, -0.45]),
                max=np.array([0.45, 0.45, 0.45]),
            ),
        ),
        sigma_max=sigma_max,
        background_albedo=(0.03, 0.03, 0.03),
    )


def two_sphere_fixture(n_train=40, n_test=10, width=100, height=100, focal=90.0):
    """Scene plus disjoint train/test camera rings (test ring phase-shifted)."""
    scene = two_sphere_scene()
    train = orbit_cameras(n_train, width=width, height=height, focal=focal, start_id=0)
    test = orbit_cameras(
        n_test,
        width=width,
        height=height,
        focal=focal,
        start_id=n_train,
        phase=np.pi / n_train,
        elevations_deg=(-5.0, 22.0),
    )
    return scene, train, test


def smooth_feature_fn(channels=8, frequency=2.0):
    """A smooth analytic feature function for distillation targets.

    Channel i mixes sin/cos of one spatial coordinate at increasing
    frequency, scaled into roughly [-1, 1]; smoothness keeps the targets
    realizable by a trilinear grid.
    """

    def fn(points):
        points = np.atleast_2d(points)
        out = np.empty((points.shape[0], channels))
        for ch in range(channels):
            axis = ch % 3
            freq = frequency * (1.0 + ch // 3)
            phase = 0.7 * ch
            if ch % 2 == 0:
                out[:, ch] = np.sin(freq * points[:, axis] + phase)
            else:
                out[:, ch] = np.cos(freq * points[:, axis] + phase)
        return out

    return fn
