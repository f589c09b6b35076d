import json

import numpy as np
import pytest


def write_ppm(path, rgb):
    """Binary P6 writer used to fabricate test image directories."""
    data = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def look_at_doc(position, width=40, height=40, focal=36.0, view_id=0, target=(0.0, 0.0, 0.0)):
    """One cameras.json view entry, OPENGL_NEG_Z, looking at target."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, forward)
    rot = np.stack([right, -true_up, -forward], axis=1)
    mat = np.eye(4)
    mat[:3, :3] = rot
    mat[:3, 3] = position
    return {
        "id": view_id,
        "width": width,
        "height": height,
        "fx": focal,
        "fy": focal,
        "cx": width / 2.0,
        "cy": height / 2.0,
        "cam_to_world": [float(x) for x in mat.reshape(-1)],
    }


def write_cameras(path, views):
    with open(path, "w") as f:
        json.dump({"convention": "OPENGL_NEG_Z", "views": views}, f)


@pytest.fixture
def flat_workspace(tmp_path):
    """Three identical views of a synthetic two-square image.

    The cameras all sit on the +z axis so 2D pixel prompts mean the same
    thing in every view; plenty for exercising the exporter's plumbing.
    """
    img = np.full((40, 40, 3), 0.05)
    img[5:15, 5:15] = (0.85, 0.15, 0.12)
    img[25:35, 25:35] = (0.12, 0.35, 0.88)
    images = tmp_path / "images"
    images.mkdir()
    views = []
    for vid in range(3):
        write_ppm(images / f"rgb_{vid:05d}.ppm", img)
        views.append(look_at_doc((0.0, 0.0, 4.0), view_id=vid))
    write_cameras(tmp_path / "cameras.json", views)
    return tmp_path, img
