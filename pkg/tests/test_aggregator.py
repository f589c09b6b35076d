import csv

import numpy as np
import pytest

from maskfield.aggregator import (
    ErrorMapSet,
    FusionConfig,
    RayTable,
    cross_entropy,
    distill_feature_field,
    full_error_map_update,
    load_config,
    mask_distance,
    mask_distance_with_grad,
    pair_loss_fixed_refs,
    ray_pair_rgb_loss,
    rgb_similarity,
    save_config,
    train_object_field,
    update_error_map,
    write_trace,
)
from maskfield.errors import ChannelMismatch, NanLoss, NoViewsRetained, ValidationError
from maskfield.fields import TrainableGrid
from maskfield.masks import FeatureFrame, project_gt_masks
from maskfield.presets import orbit_cameras, smooth_feature_fn, two_sphere_scene


def tiny_setup():
    scene = two_sphere_scene()
    cams = orbit_cameras(3, width=16, height=16, focal=14.0)
    frames = project_gt_masks(scene, cams, n_samples=32)
    return scene, cams, frames


def tiny_config(**kw):
    base = dict(
        n_channels=3,
        iterations=6,
        warmup_iters=3,
        global_batch=256,
        rgb_refs=4,
        patch_size=4,
        rays_per_patch=8,
        error_points=4,
        errmap_downsample=4,
        errmap_full_update_every=5,
        samples_per_ray=24,
        grid_levels=(4, 8),
        seed=0,
    )
    base.update(kw)
    return FusionConfig(**base)


# --- config -----------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    cfg = tiny_config(tau=0.07, lr=3e-3)
    path = tmp_path / "cfg.json"
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_config_rejects_unknown_fields():
    with pytest.raises(ValidationError, match="bogus"):
        FusionConfig.from_dict({"n_channels": 3, "bogus": 1})


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_channels=0),
        dict(warmup_iters=10, iterations=5),
        dict(tau=-0.1),
        dict(w=0.0),
        dict(global_batch=0),
        dict(error_points=0),
    ],
)
def test_config_validation(kw):
    base = dict(n_channels=3)
    base.update(kw)
    with pytest.raises(ValidationError):
        FusionConfig(**base)


def test_with_overrides_skips_none():
    cfg = tiny_config()
    assert cfg.with_overrides(lr=None, iterations=9).iterations == 9
    assert cfg.with_overrides(lr=None).lr == cfg.lr


# --- loss hand values ----------------------------------------------------------


def test_cross_entropy_hand_values():
    assert cross_entropy([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2) / 2)
    assert cross_entropy([1.0, 0.0], [0.9, 0.1]) == pytest.approx(-np.log(0.9) / 2)
    # channel count divides the sum
    assert cross_entropy([1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]) == pytest.approx(np.log(2) / 4)


def test_cross_entropy_clips_zero_predictions():
    v = cross_entropy([1.0, 0.0], [0.0, 1.0])
    assert np.isfinite(v)
    assert v == pytest.approx(-np.log(1e-12) / 2)


def test_cross_entropy_batch_rows():
    gt = np.array([[1.0, 0.0], [0.0, 1.0]])
    pred = np.array([[0.5, 0.5], [0.25, 0.75]])
    vals = cross_entropy(gt, pred)
    assert vals.shape == (2,)
    assert vals[0] == pytest.approx(np.log(2) / 2)
    assert vals[1] == pytest.approx(-np.log(0.75) / 2)


def test_rgb_similarity_is_euclidean():
    assert rgb_similarity((0.0, 0.0, 0.0), (0.3, 0.4, 0.0)) == pytest.approx(0.5)
    assert rgb_similarity((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)) == 0.0


def test_mask_distance_hand_values():
    one = np.array([1.0, 0.0, 0.0])
    other = np.array([0.0, 1.0, 0.0])
    assert mask_distance(one, one) == pytest.approx(np.exp(-4.0))
    assert mask_distance(one, other) == pytest.approx(1.0)
    # dot 0.5 against max norm 1 -> ratio 0.5
    assert mask_distance(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(np.exp(-2.0))
    # zero vectors count as maximally distant
    z = np.zeros(3)
    assert mask_distance(z, z) == pytest.approx(1.0)


def test_mask_distance_bounds():
    rng = np.random.default_rng(0)
    m0 = rng.dirichlet(np.ones(4), size=200)
    m1 = rng.dirichlet(np.ones(4), size=200)
    f = mask_distance(m0, m1, w=4.0, eps=0.1)
    assert np.all(f >= np.exp(-4.0 - 0.1) - 1e-15)
    assert np.all(f <= np.exp(-0.1) + 1e-15)


def test_mask_distance_grad_matches_value_and_fd():
    rng = np.random.default_rng(1)
    ref = rng.dirichlet(np.ones(3))
    others = rng.dirichlet(np.ones(3), size=6)
    f, grad = mask_distance_with_grad(ref, others, w=4.0, eps=0.05)
    assert np.allclose(f, mask_distance(np.broadcast_to(ref, others.shape), others, 4.0, 0.05))
    eps = 1e-7
    for i in range(6):
        for c in range(3):
            others[i, c] += eps
            hi = mask_distance(ref, others[i], 4.0, 0.05)
            others[i, c] -= 2 * eps
            lo = mask_distance(ref, others[i], 4.0, 0.05)
            others[i, c] += eps
            assert grad[i, c] == pytest.approx((hi - lo) / (2 * eps), abs=1e-6)


# --- pair loss ------------------------------------------------------------------


def test_pair_loss_reference_side_is_detached():
    cfg = tiny_config(tau=0.1)
    colors = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])  # identical -> paired
    probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.5, 0.3]])
    loss, dprobs, used = pair_loss_fixed_refs(colors, probs, [0], [probs[0].copy()], cfg)
    assert used == 1
    assert loss == pytest.approx(mask_distance(probs[0], probs[1], cfg.w, cfg.eps))
    # the reference row gets no gradient through its own set
    assert np.all(dprobs[0] == 0.0)
    assert np.any(dprobs[1] != 0.0)
    # the member gradient treats the reference distribution as constant
    eps = 1e-7
    ref = probs[0].copy()
    for c in range(3):
        probs[1, c] += eps
        hi = mask_distance(ref, probs[1], cfg.w, cfg.eps)
        probs[1, c] -= 2 * eps
        lo = mask_distance(ref, probs[1], cfg.w, cfg.eps)
        probs[1, c] += eps
        assert dprobs[1, c] == pytest.approx((hi - lo) / (2 * eps), abs=1e-6)


def test_pair_loss_excludes_the_reference_from_its_set():
    cfg = tiny_config()
    colors = np.array([[0.1, 0.1, 0.1]])
    probs = np.array([[0.6, 0.3, 0.1]])
    loss, dprobs, used = ray_pair_rgb_loss(colors, probs, cfg, np.random.default_rng(0))
    assert loss == 0.0 and used == 0
    assert np.all(dprobs == 0.0)


def test_pair_loss_ignores_dissimilar_colors():
    cfg = tiny_config(tau=0.05)
    colors = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    probs = np.full((2, 3), 1 / 3)
    loss, dprobs, used = ray_pair_rgb_loss(colors, probs, cfg, np.random.default_rng(0))
    assert used == 0 and loss == 0.0 and not np.any(dprobs)


def test_pair_loss_similarity_flip_reverses_membership():
    cfg = tiny_config(tau=0.05, similar_above_tau=True)
    colors = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.5, 0.3]])
    loss, _, used = ray_pair_rgb_loss(colors, probs, cfg, np.random.default_rng(0))
    assert used == 2
    assert loss > 0.0


def test_pair_loss_empty_input():
    cfg = tiny_config()
    loss, dprobs, used = ray_pair_rgb_loss(np.zeros((0, 3)), np.zeros((0, 3)), cfg, np.random.default_rng(0))
    assert loss == 0.0 and used == 0 and dprobs.shape == (0, 3)


def test_pair_loss_full_gradient_matches_fd():
    cfg = tiny_config(tau=0.4, rgb_refs=3)
    rng = np.random.default_rng(7)
    colors = rng.uniform(0, 1, (8, 3)) * 0.3  # several pairs inside tau
    probs = np.exp(rng.normal(size=(8, 3)))
    probs /= probs.sum(axis=1, keepdims=True)
    refs = np.array([0, 3, 5])
    ref_probs = probs[refs].copy()
    loss, dprobs, used = pair_loss_fixed_refs(colors, probs, refs, ref_probs, cfg)
    assert used >= 1
    eps = 1e-6
    for i in range(8):
        for c in range(3):
            probs[i, c] += eps
            hi, _, _ = pair_loss_fixed_refs(colors, probs, refs, ref_probs, cfg)
            probs[i, c] -= 2 * eps
            lo, _, _ = pair_loss_fixed_refs(colors, probs, refs, ref_probs, cfg)
            probs[i, c] += eps
            assert dprobs[i, c] == pytest.approx((hi - lo) / (2 * eps), abs=2e-5)


# --- error maps ------------------------------------------------------------------


def test_error_maps_start_at_maximum_error():
    maps = ErrorMapSet([3, 9], [(10, 10), (8, 12)], downsample=4, w=4.0, eps=0.2)
    assert maps.maps[3].shape == (3, 3)
    assert maps.maps[9].shape == (2, 3)
    for vid in (3, 9):
        assert np.all(maps.maps[vid] == np.exp(-0.2))


def test_cells_of_maps_pixels_to_cells():
    maps = ErrorMapSet([0], [(10, 10)], downsample=4, w=4.0, eps=0.0)
    cols = maps.maps[0].shape[1]
    assert maps.cells_of(0, 5, 9) == (9 // 4) * cols + (5 // 4)
    assert maps.cells_of(0, 0, 0) == 0


def test_overwrite_keeps_the_last_ray_per_cell():
    maps = ErrorMapSet([0], [(8, 8)], downsample=4, w=4.0, eps=0.0)
    px = np.array([0, 1, 5])  # first two land in cell 0, third in cell 1
    py = np.array([0, 2, 0])
    maps.overwrite(0, px, py, np.array([0.3, 0.8, 0.5]))
    assert maps.maps[0][0, 0] == 0.8
    assert maps.maps[0][0, 1] == 0.5
    assert maps.maps[0][1, 0] == 1.0  # untouched cell keeps its value


def test_update_error_map_scores_disagreement():
    maps = ErrorMapSet([0], [(8, 8)], downsample=4, w=4.0, eps=0.0)
    gt = np.array([[1.0, 0.0, 0.0]])
    update_error_map(maps, 0, 1, 1, gt, gt)
    assert maps.maps[0][0, 0] == pytest.approx(np.exp(-4.0))
    update_error_map(maps, 0, 5, 5, gt, np.array([[0.0, 1.0, 0.0]]))
    assert maps.maps[0][1, 1] == pytest.approx(1.0)


def test_cell_centers_clip_to_the_image():
    maps = ErrorMapSet([0], [(10, 10)], downsample=4, w=4.0, eps=0.0)
    px, py = maps.cell_center_pixels(0, 10, 10)
    assert sorted(set(px)) == [2, 6, 9]
    assert sorted(set(py)) == [2, 6, 9]


def test_draws_concentrate_on_high_error_cells():
    maps = ErrorMapSet([0, 1], [(8, 8), (8, 8)], downsample=4, w=4.0, eps=0.0)
    maps.set_view(0, np.zeros(4))
    hot = np.zeros(4)
    hot[3] = 1.0  # cell (1, 1) of view 1
    maps.set_view(1, hot)
    draws = maps.draw(np.random.default_rng(0), 20)
    assert draws == [(1, 1, 1)] * 20


def test_full_error_map_update_matches_the_zero_grid_value():
    """With all-zero logits every rendered distribution is uniform, so every
    cell must score mask_distance(one_hot, uniform) = exp(-w / L)."""
    scene, cams, frames = tiny_setup()
    cfg = tiny_config()
    table = RayTable(scene, cams, [f.probs for f in frames])
    grid = TrainableGrid.zeros(scene.bbox, 3, cfg.grid_levels)
    maps = ErrorMapSet([c.view_id for c in cams], [(16, 16)] * 3, cfg.errmap_downsample, cfg.w, cfg.eps)
    full_error_map_update(scene, grid, table, maps, cfg)
    expect = np.exp(-cfg.w / 3)
    for cam in cams:
        assert np.abs(maps.maps[cam.view_id] - expect).max() < 1e-12


# --- ray table -------------------------------------------------------------------


def test_ray_table_targets_align_with_frames():
    scene, cams, frames = tiny_setup()
    table = RayTable(scene, cams, [f.probs for f in frames])
    rng = np.random.default_rng(2)
    for vi, frame in enumerate(frames):
        px = rng.integers(0, 16, size=10)
        py = rng.integers(0, 16, size=10)
        gids = table.index_of(vi, px, py)
        assert np.array_equal(table.targets[gids], frame.probs[py, px])
        sl = table.view_slice(vi)
        assert sl.stop - sl.start == 256


def test_ray_table_surface_cache():
    scene, cams, frames = tiny_setup()
    table = RayTable(scene, cams, [f.probs for f in frames])
    table.ensure_surface(n_samples=48)
    solid = table.surface_t > 0
    assert solid.any() and not solid.all()
    # solid pixels sit on the spheres: distance from origin near a radius
    pts = table.origins[solid] + table.surface_t[solid, None] * table.dirs[solid]
    assert np.all(np.linalg.norm(pts, axis=1) < 1.0)
    assert np.all(table.surface_z[solid] > 0)
    bg = np.asarray(scene.background_albedo)
    # rays that miss the scene box entirely keep the background color
    # (translucent silhouette rays legitimately pick up a tint)
    assert np.allclose(table.pixel_color[~table.hit], bg, atol=1e-12)


# --- training loop ---------------------------------------------------------------


def test_training_validates_inputs():
    scene, cams, frames = tiny_setup()
    cfg = tiny_config()
    with pytest.raises(NoViewsRetained):
        train_object_field(scene, [], [], cfg)
    with pytest.raises(ValidationError, match="length"):
        train_object_field(scene, frames, cams[:2], cfg)
    with pytest.raises(ValidationError, match="view id"):
        train_object_field(scene, [frames[1], frames[0], frames[2]], cams, cfg)
    with pytest.raises(ChannelMismatch):
        train_object_field(scene, frames, cams, tiny_config(n_channels=5))


def test_training_trace_and_warmup_gate():
    scene, cams, frames = tiny_setup()
    cfg = tiny_config(iterations=5, warmup_iters=5)
    grid, trace = train_object_field(scene, frames, cams, cfg)
    assert len(trace) == 5
    its, ce, pair, total = zip(*trace)
    assert list(its) == list(range(5))
    assert all(np.isfinite(v) for v in total)
    assert all(v == 0.0 for v in pair)  # color loss gated off for the whole run
    assert all(t == a + b for a, b, t in zip(ce, pair, total))
    assert grid.channels == 3


def test_color_loss_energizes_after_warmup():
    scene, cams, frames = tiny_setup()
    cfg = tiny_config(iterations=8, warmup_iters=2, error_points=6)
    _, trace = train_object_field(scene, frames, cams, cfg)
    pair = [row[2] for row in trace]
    assert all(v == 0.0 for v in pair[:2])
    assert any(v > 0.0 for v in pair[2:])


def test_training_drives_cross_entropy_to_its_floor():
    """Rays through empty space render uniform forever, so the reachable
    cross entropy is bounded below by ln(L)/L times the empty fraction.
    Training should shed most of the reducible part above that floor."""
    from maskfield.render import render_view

    scene, cams, frames = tiny_setup()
    empty = [
        (render_view(scene, cam, n_samples=64, want=("opacity",))["opacity"] == 0).mean()
        for cam in cams
    ]
    floor = np.log(3) / 3 * float(np.mean(empty))
    cfg = tiny_config(iterations=150, warmup_iters=150, global_batch=512, lr=5e-2, grid_levels=(8, 16))
    _, trace = train_object_field(scene, frames, cams, cfg)
    ce0, ceN = trace[0][1], trace[-1][1]
    assert ce0 > floor
    assert ceN - floor < 0.3 * (ce0 - floor)


def test_training_is_worker_count_invariant():
    scene, cams, frames = tiny_setup()
    cfg = tiny_config(iterations=6, warmup_iters=3)
    g1, t1 = train_object_field(scene, frames, cams, cfg, workers=1)
    g3, t3 = train_object_field(scene, frames, cams, cfg, workers=3)
    assert t1 == t3
    for a, b in zip(g1.levels, g3.levels):
        assert np.array_equal(a.values, b.values)


def test_trace_csv_roundtrip(tmp_path):
    trace = [(0, 0.5, 0.0, 0.5), (1, 0.25, 0.125, 0.375)]
    path = tmp_path / "trace.csv"
    write_trace(path, trace)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iteration", "L_o", "L_RGB", "total"]
    parsed = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]
    assert parsed == trace


# --- feature distillation ----------------------------------------------------------


def feature_frames_for(scene, cams, channels=4):
    from maskfield.masks import project_feature_frames

    return project_feature_frames(scene, cams, smooth_feature_fn(channels=channels), n_samples=32)


def test_distillation_reduces_mse():
    scene, cams, _ = tiny_setup()
    frames = feature_frames_for(scene, cams)
    cfg = tiny_config(iterations=30, warmup_iters=30, global_batch=512, lr=2e-2)
    grid, trace = distill_feature_field(scene, frames, cams, cfg)
    assert grid.channels == 4
    assert trace[-1][1] < 0.25 * trace[0][1]


def test_distillation_rejects_mixed_channels():
    scene, cams, _ = tiny_setup()
    frames = feature_frames_for(scene, cams)
    frames[1] = FeatureFrame(view_id=frames[1].view_id, values=frames[1].values[:, :, :2])
    with pytest.raises(ChannelMismatch):
        distill_feature_field(scene, frames, cams, tiny_config())
    with pytest.raises(NoViewsRetained):
        distill_feature_field(scene, [], [], tiny_config())


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_exploding_loss_raises_instead_of_clamping():
    scene, cams, _ = tiny_setup()
    frames = feature_frames_for(scene, cams)
    cfg = tiny_config(iterations=10, warmup_iters=10, lr=1e200)
    with pytest.raises(NanLoss):
        distill_feature_field(scene, frames, cams, cfg)
