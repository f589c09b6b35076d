"""The promptable segmenter behind the exporter.

One variant ships in this package: a classical color-seed model that needs
no weights.  Its "encoder" is a stack of multi-scale local color averages;
its "decoder" scores every pixel by color similarity to the prompted seed
pixels and squashes the resulting logits through a logistic.  Anything that
names an actual pretrained checkpoint raises ModelLoad, since no weights
ship with this package; the point of the builtin is that the full export
path stays executable and testable.
"""

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .errors import ModelLoad

BUILTIN = "builtin-colorseed"

# Color-similarity kernel: seeds match pixels within roughly BANDWIDTH in
# RGB space; TEMPERATURE sets how hard the logistic saturates around it.
# A negative seed outweighs a positive one of equal similarity, so clicks
# meant to carve a region out actually win there.
BANDWIDTH = 0.22
TEMPERATURE = BANDWIDTH**2 / 4.0
NEGATIVE_WEIGHT = 2.0

# Seed smoothing only needs to absorb pixel-level noise; anything coarser
# bleeds neighboring objects into the seed color on small or nearby objects.
SEED_BLUR = 0.6
COARSE_BLUR = 4.0
FEATURE_STRIDE = 4
FEATURE_CHANNELS = 8


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = gaussian_filter(img[:, :, c], sigma, mode="nearest")
    return out


class ColorSeedModel:
    """Prompt -> mask via color similarity; images -> smoothed color features."""

    id = BUILTIN
    feature_channels = FEATURE_CHANNELS
    feature_stride = FEATURE_STRIDE

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) -> (H/stride, W/stride, 8) multi-scale color features."""
        fine = _blur(image, SEED_BLUR)
        coarse = _blur(image, COARSE_BLUR)
        luma_fine = fine.mean(axis=2, keepdims=True)
        luma_coarse = coarse.mean(axis=2, keepdims=True)
        feats = np.concatenate([fine, coarse, luma_fine, luma_coarse], axis=2)
        return feats[:: self.feature_stride, :: self.feature_stride, :]

    def seed_color(self, image: np.ndarray, px: float, py: float) -> np.ndarray:
        """The smoothed color a seed at (px, py) would match against."""
        h, w = image.shape[:2]
        ix = int(np.clip(round(px), 0, w - 1))
        iy = int(np.clip(round(py), 0, h - 1))
        return _blur(image, SEED_BLUR)[iy, ix]

    def colors_match(self, a: np.ndarray, b: np.ndarray) -> bool:
        """Whether two seed colors would select each other's pixels."""
        return float(((a - b) ** 2).sum()) <= BANDWIDTH**2

    def snap_to_color(self, image: np.ndarray, color: np.ndarray, px: float, py: float):
        """Nearest pixel to (px, py) whose smoothed color matches; None if none.

        Re-anchors a prompt whose projection landed on an occluder: if the
        object's color shows anywhere in the view, the seed moves to the
        closest such pixel.
        """
        smooth = _blur(image, SEED_BLUR)
        d2 = ((smooth - color) ** 2).sum(axis=2)
        ys, xs = np.nonzero(d2 <= BANDWIDTH**2)
        if len(ys) == 0:
            return None
        nearest = np.argmin((xs - px) ** 2 + (ys - py) ** 2)
        return float(xs[nearest]), float(ys[nearest])

    def decode(self, image: np.ndarray, seeds, n_channels: int) -> np.ndarray:
        """Per-pixel label probabilities from seed pixels.

        seeds: iterable of (px, py, object_id, polarity) with polarity in
        {"positive", "negative"}.  Returns (H, W, n_channels) rows summing
        to 1; channel 0 is the background residual.
        """
        smooth = _blur(image, SEED_BLUR)
        h, w = image.shape[:2]
        pos_logit = np.full((h, w, n_channels), -np.inf)
        neg_logit = np.full((h, w, n_channels), -np.inf)
        for px, py, object_id, polarity in seeds:
            ix = int(np.clip(round(px), 0, w - 1))
            iy = int(np.clip(round(py), 0, h - 1))
            seed_color = smooth[iy, ix]
            d2 = ((smooth - seed_color) ** 2).sum(axis=2)
            logit = (BANDWIDTH**2 - d2) / TEMPERATURE
            target = pos_logit if polarity == "positive" else neg_logit
            target[:, :, object_id] = np.maximum(target[:, :, object_id], logit)

        fg = np.zeros((h, w, n_channels))
        prompted = np.isfinite(pos_logit).any(axis=(0, 1))
        for ch in np.flatnonzero(prompted):
            logit = pos_logit[:, :, ch].copy()
            neg = neg_logit[:, :, ch]
            logit -= NEGATIVE_WEIGHT * np.where(np.isfinite(neg), np.maximum(neg, 0.0), 0.0)
            fg[:, :, ch] = expit(logit)

        probs = fg
        probs[:, :, 0] = np.maximum(1.0 - fg[:, :, 1:].sum(axis=2), 1e-4)
        return probs / probs.sum(axis=2, keepdims=True)


def resolve_model(model_id: str):
    if model_id == BUILTIN:
        return ColorSeedModel()
    raise ModelLoad(f"no weights installed for model variant {model_id!r}; available: {BUILTIN}")
