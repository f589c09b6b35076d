"""Volumetric compositing along rays.

Weights follow the standard emission-absorption model: with tau_k =
sigma_k * delta_k, transmittance T_k = exp(-sum_{a<k} tau_a) and
w_k = T_k * (1 - exp(-tau_k)).  Any per-sample payload (logits, color,
features, the sample distance itself) composites as sum_k w_k * payload_k.
The weights sum to 1 - exp(-sum tau) <= 1; the deficit is the light that
escapes, and only RGB rendering fills it with a background color.

Mask probabilities are a softmax over composited per-class logits.  A ray
that never touches density composites zero logits, and softmax of a zero
vector is already uniform, so empty rays need no special casing.

Samples with sigma == 0 have exactly zero weight and exactly zero gradient,
so train-time paths compress to the sigma > 0 subset before touching the
trainable grid.  This is an identity, not an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import uniform01

__all__ = [
    "stratified_samples",
    "composite_weights",
    "composite_payload",
    "oracle_composite",
    "softmax_rows",
    "softmax_backward",
    "sample_batch",
    "ActiveSamples",
    "normalized_depth",
    "render_view",
]


def stratified_samples(t0, t1, n_samples, *, seed=0, view_ids=0, pixel_index=0, iteration=0, jitter=True):
    """Per-ray sample distances and spacings.

    One sample per bin of [t0, t1); jittered position inside the bin comes
    from the counter RNG keyed on (seed, view, pixel, iteration, bin), so a
    ray resamples identically no matter which batch or worker handles it.
    With jitter off the sample sits at the bin midpoint.

    Returns (t, delta), both (R, n_samples); delta[k] = t[k+1] - t[k] with
    the last entry running to t1.
    """
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
    t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
    k = np.arange(n_samples, dtype=np.uint64)[None, :]
    if jitter:
        vid = np.asarray(view_ids, dtype=np.uint64).reshape(-1, 1)
        pix = np.asarray(pixel_index, dtype=np.uint64).reshape(-1, 1)
        u = uniform01(np.uint64(seed), vid, pix, np.uint64(iteration), k)
        u = np.broadcast_to(u, (t0.shape[0], n_samples))
    else:
        u = np.full((t0.shape[0], n_samples), 0.5)
    step = ((t1 - t0) / n_samples)[:, None]
    t = t0[:, None] + (np.arange(n_samples) + u) * step
    delta = np.diff(t, axis=1, append=t1[:, None])
    return t, delta


def composite_weights(sigma, delta):
    """Compositing weights and end-of-ray transmittance.

    Accepts (..., K) arrays; exclusive cumulative optical depth is built by
    shifting the inclusive cumsum so partial sums accumulate left to right,
    matching a scalar reference implementation term for term.
    """
    tau = sigma * delta
    cum = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(cum[..., :1]), cum[..., :-1]], axis=-1)
    w = np.exp(-excl) * -np.expm1(-tau)
    return w, np.exp(-cum[..., -1])


def composite_payload(weights, payload):
    """sum_k w_k * payload_k over the sample axis; payload (..., K) or (..., K, D)."""
    if payload.ndim == weights.ndim:
        return (weights * payload).sum(axis=-1)
    return (weights[..., None] * payload).sum(axis=-2)


def oracle_composite(sigma, delta, payload):
    """Slow per-ray reference for the vectorized compositor (tests only)."""
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    payload = np.asarray(payload, dtype=np.float64)
    if payload.ndim == 2:
        payload = payload[..., None]
    n_rays, n_samples = sigma.shape
    values = np.zeros((n_rays, payload.shape[-1]))
    weights = np.zeros((n_rays, n_samples))
    trans_end = np.zeros(n_rays)
    for r in range(n_rays):
        acc = 0.0
        for k in range(n_samples):
            t_hat = np.exp(-acc)
            alpha = 1.0 - np.exp(-sigma[r, k] * delta[r, k])
            weights[r, k] = t_hat * alpha
            values[r] += weights[r, k] * payload[r, k]
            acc += sigma[r, k] * delta[r, k]
        trans_end[r] = np.exp(-acc)
    return values, weights, trans_end


def softmax_rows(s):
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs, upstream):
    """d(loss)/d(logits) given d(loss)/d(probs), row-wise softmax Jacobian."""
    dot = (upstream * probs).sum(axis=-1, keepdims=True)
    return probs * (upstream - dot)


# ---------------------------------------------------------------------------
# batched sampling against a frozen scene


@dataclass
class ActiveSamples:
    """Compressed sigma > 0 subset of a sampled ray batch.

    ray_index/points/weights/t cover only active samples, in ray-major then
    sample-major order.  n_rays keeps the original batch size for reductions.
    """

    n_rays: int
    ray_index: np.ndarray  # (A,)
    points: np.ndarray  # (A, 3)
    weights: np.ndarray  # (A,)
    t: np.ndarray  # (A,)
    trans_end: np.ndarray  # (R,)

    def composite(self, payload):
        """Per-ray sum of w * payload over active samples; payload (A,) or (A, D)."""
        if payload.ndim == 1:
            return np.bincount(self.ray_index, weights=self.weights * payload, minlength=self.n_rays)
        out = np.empty((self.n_rays, payload.shape[1]))
        for ch in range(payload.shape[1]):
            out[:, ch] = np.bincount(self.ray_index, weights=self.weights * payload[:, ch], minlength=self.n_rays)
        return out

    @property
    def opacity(self):
        return 1.0 - self.trans_end


def _candidate_mask(scene, origins, dirs, t):
    """(R, K) bool, True wherever density could be nonzero.

    Intersects each ray with every primitive's influence sphere (a cheap
    per-ray quadratic) so the exact density function only runs on samples
    inside some sphere.  Conservative: excluded samples have sigma exactly 0.
    """
    bounds = scene.influence_spheres() if hasattr(scene, "influence_spheres") else None
    if bounds is None:
        return None
    centers, radii = bounds
    cand = np.zeros(t.shape, dtype=bool)
    for center, radius in zip(centers, radii):
        rel = center - origins
        mid = np.einsum("ij,ij->i", rel, dirs)
        closest_sq = np.einsum("ij,ij->i", rel, rel) - mid * mid
        span_sq = radius * radius - closest_sq
        crosses = span_sq > 0.0
        if not crosses.any():
            continue
        span = np.sqrt(np.maximum(span_sq, 0.0))
        lo = (mid - span)[:, None]
        hi = (mid + span)[:, None]
        cand |= crosses[:, None] & (t >= lo) & (t <= hi)
    return cand


def sample_batch(scene, origins, dirs, t, delta) -> ActiveSamples:
    """Evaluate scene density on a sampled batch and compress to sigma > 0."""
    n_rays, n_samples = t.shape
    cand = _candidate_mask(scene, origins, dirs, t)
    if cand is None:
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        sigma = scene.sample_density(pts.reshape(-1, 3)).reshape(n_rays, n_samples)
        w, trans_end = composite_weights(sigma, delta)
        act_r, act_k = np.nonzero(sigma > 0.0)
        return ActiveSamples(
            n_rays=n_rays,
            ray_index=act_r,
            points=pts[act_r, act_k],
            weights=w[act_r, act_k],
            t=t[act_r, act_k],
            trans_end=trans_end,
        )
    cr, ck = np.nonzero(cand)
    sigma = np.zeros((n_rays, n_samples))
    if cr.size:
        pts_cand = origins[cr] + t[cr, ck, None] * dirs[cr]
        sigma_cand = scene.sample_density(pts_cand)
        sigma[cr, ck] = sigma_cand
    w, trans_end = composite_weights(sigma, delta)
    if cr.size:
        # sigma > 0 implies candidacy, and both index sets are row-major,
        # so the active subset aligns with pts_cand
        act = sigma_cand > 0.0
        act_r = cr[act]
        act_k = ck[act]
        points = pts_cand[act]
    else:
        act_r = np.empty(0, dtype=np.int64)
        act_k = np.empty(0, dtype=np.int64)
        points = np.empty((0, 3))
    return ActiveSamples(
        n_rays=n_rays,
        ray_index=act_r,
        points=points,
        weights=w[act_r, act_k],
        t=t[act_r, act_k],
        trans_end=trans_end,
    )


def normalized_depth(depth, opacity, threshold=0.5):
    """Opacity-normalized hit distance; 0 where the ray is effectively empty."""
    solid = opacity >= threshold
    out = np.zeros_like(depth)
    np.divide(depth, opacity, out=out, where=solid)
    return out


# ---------------------------------------------------------------------------
# full-frame rendering


def render_view(
    scene,
    camera,
    *,
    field=None,
    n_samples=128,
    batch_rays=8192,
    seed=0,
    iteration=0,
    jitter=False,
    want=("rgb", "depth", "opacity"),
):
    """Render whole-frame images for one camera.

    want may include "rgb", "depth", "opacity", "mask", "feature"; "mask"
    and "feature" read the trainable field (class logits or feature
    channels).  Depth is the raw composited distance; divide by opacity via
    normalized_depth for surface lookups.  Rays that miss the scene box
    stay at the empty-ray values (background color, zero depth/opacity,
    uniform mask).
    """
    from .geometry import rays_for_pixels

    h, w = camera.height, camera.width
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    px = px.ravel()
    py = py.ravel()
    pixel_index = (py * w + px).astype(np.uint64)
    origins, dirs, t0, t1, hit = rays_for_pixels(camera, px, py, scene.bbox)

    out = {}
    bg = np.asarray(scene.background_albedo, dtype=np.float64)
    if "rgb" in want:
        out["rgb"] = np.broadcast_to(bg, (h * w, 3)).copy()
    if "depth" in want:
        out["depth"] = np.zeros(h * w)
    if "opacity" in want:
        out["opacity"] = np.zeros(h * w)
    if "mask" in want:
        out["mask"] = np.full((h * w, field.channels), 1.0 / field.channels)
    if "feature" in want:
        out["feature"] = np.zeros((h * w, field.channels))

    live = np.flatnonzero(hit)
    for start in range(0, live.size, batch_rays):
        sel = live[start : start + batch_rays]
        t, delta = stratified_samples(
            t0[sel],
            t1[sel],
            n_samples,
            seed=seed,
            view_ids=np.full(sel.size, camera.view_id, dtype=np.uint64),
            pixel_index=pixel_index[sel],
            iteration=iteration,
            jitter=jitter,
        )
        act = sample_batch(scene, origins[sel], dirs[sel], t, delta)
        if "rgb" in want:
            color = scene.sample_color(act.points)
            out["rgb"][sel] = act.composite(color) + act.trans_end[:, None] * bg
        if "depth" in want:
            out["depth"][sel] = act.composite(act.t)
        if "opacity" in want:
            out["opacity"][sel] = act.opacity
        if "mask" in want or "feature" in want:
            vals = field.query(act.points) if act.points.size else np.zeros((0, field.channels))
            comped = act.composite(vals)
            if "mask" in want:
                out["mask"][sel] = softmax_rows(comped)
            if "feature" in want:
                out["feature"][sel] = comped

    shaped = {}
    for key, img in out.items():
        shaped[key] = img.reshape((h, w) if img.ndim == 1 else (h, w, img.shape[1]))
    return shaped
