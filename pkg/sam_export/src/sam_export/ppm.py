"""Binary PPM (P6) reading for the multi-view image directories.

The fusion engine's renderer emits 8-bit P6 files named rgb_XXXXX.ppm; this
is the whole image-format surface the exporter needs.
"""

import re
from pathlib import Path

import numpy as np

from .errors import InputMismatch


def read_ppm(path) -> np.ndarray:
    """Returns (H, W, 3) floats in [0, 1]."""
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise InputMismatch(f"{path}: not a binary P6 file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InputMismatch(f"{path}: only 8-bit images supported, maxval={maxval}")
    body = raw[pos + 1 :]
    if len(body) != w * h * 3:
        raise InputMismatch(f"{path}: payload {len(body)} bytes, header implies {w * h * 3}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def view_id_of(path) -> int:
    m = re.search(r"(\d+)\.ppm$", Path(path).name)
    if m is None:
        raise InputMismatch(f"{path}: cannot read a view id from the filename")
    return int(m.group(1))


def list_images(directory) -> list[tuple[int, Path]]:
    """(view_id, path) pairs, sorted by view id."""
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise InputMismatch(f"no .ppm images in {directory}")
    return sorted((view_id_of(p), p) for p in paths)
