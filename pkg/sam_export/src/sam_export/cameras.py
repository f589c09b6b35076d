"""Just enough of the cameras.json contract to place prompts.

A view is id, size, pinhole intrinsics, and a 4x4 cam_to_world stored as a
flat row-major list.  The convention flag says which camera axis points
into the scene: OPENGL_NEG_Z looks down -z with y up, OPENCV_POS_Z looks
down +z with y down.  Projection puts pixel centers on integer coordinates,
matching the fusion engine's ray generation.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputMismatch


@dataclass(frozen=True)
class View:
    view_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (4, 4)
    zsign: float  # -1 for OPENGL_NEG_Z, +1 for OPENCV_POS_Z

    def project(self, points: np.ndarray):
        """World points (N, 3) -> (pixels (N, 2), in_front (N,) bool)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rot = self.cam_to_world[:3, :3]
        origin = self.cam_to_world[:3, 3]
        p_cam = (pts - origin) @ rot
        depth = self.zsign * p_cam[:, 2]
        ok = depth > 0
        safe = np.where(ok, depth, 1.0)
        px = self.fx * (p_cam[:, 0] / safe) + self.cx - 0.5
        py = self.fy * (self.zsign * p_cam[:, 1] / safe) + self.cy - 0.5
        return np.stack([px, py], axis=1), ok

    def contains(self, px: float, py: float) -> bool:
        return -0.5 <= px <= self.width - 0.5 and -0.5 <= py <= self.height - 0.5


def load_views(path) -> list[View]:
    with open(path) as f:
        doc = json.load(f)
    try:
        conv = doc["convention"]
        if conv not in ("OPENGL_NEG_Z", "OPENCV_POS_Z"):
            raise InputMismatch(f"unknown camera convention {conv!r}")
        zsign = -1.0 if conv == "OPENGL_NEG_Z" else 1.0
        views = []
        for v in doc["views"]:
            mat = np.asarray(v["cam_to_world"], dtype=np.float64).reshape(4, 4)
            views.append(
                View(
                    view_id=int(v["id"]),
                    width=int(v["width"]),
                    height=int(v["height"]),
                    fx=float(v["fx"]),
                    fy=float(v["fy"]),
                    cx=float(v["cx"]),
                    cy=float(v["cy"]),
                    cam_to_world=mat,
                    zsign=zsign,
                )
            )
    except (KeyError, TypeError, ValueError) as e:
        raise InputMismatch(f"{path}: malformed cameras file ({e})") from e
    if not views:
        raise InputMismatch(f"{path}: no views")
    return views
