"""Binary PPM/PGM output and class-color overlays.

Everything here quantizes with round(255 * value) after clipping to [0, 1],
so renders are reproducible byte for byte.
"""

from __future__ import annotations

import numpy as np

# Background is black; object hues are spaced far apart and repeat after 12.
_PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.90, 0.10, 0.10],
        [0.10, 0.55, 0.90],
        [0.15, 0.80, 0.25],
        [0.95, 0.75, 0.10],
        [0.70, 0.25, 0.85],
        [0.95, 0.45, 0.10],
        [0.10, 0.80, 0.75],
        [0.85, 0.30, 0.55],
        [0.55, 0.65, 0.10],
        [0.35, 0.35, 0.95],
        [0.60, 0.40, 0.20],
    ]
)


def class_color(label: np.ndarray) -> np.ndarray:
    """RGB color per integer label; 0 stays black."""
    label = np.asarray(label)
    idx = np.where(label == 0, 0, (label - 1) % (len(_PALETTE) - 1) + 1)
    return _PALETTE[idx]


def quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray):
    """Binary P6, 8-bit; rgb is (H, W, 3) floats in [0, 1]."""
    data = quantize(rgb)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def write_pgm(path, gray: np.ndarray):
    """Binary P5, 8-bit; gray is (H, W) floats in [0, 1]."""
    data = quantize(gray)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of write_ppm for round-trip checks; returns floats in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        # whitespace-delimited header tokens, '#' comments run to end of line
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    data = np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def overlay(rgb: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Half rendered color, half class color; the standard mask visual."""
    return 0.5 * rgb + 0.5 * class_color(labels)
