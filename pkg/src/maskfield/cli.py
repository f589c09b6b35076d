"""Command-line workflow: scene generation, corruption, fusion, rendering,
evaluation, consistency checks, feature distillation, and gradient checks.

Every command is a pure function of (inputs, config, seed); data artifacts
are byte-identical across re-runs.  Each command writes a run manifest
recording the resolved configuration digest, inputs, outputs, and timing
(the manifest's wall time is provenance, not part of the deterministic
artifact set).

Exit codes: 0 success, 2 validation/input errors, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .aggregator import FusionConfig, distill_feature_field, load_config, train_object_field, write_trace
from .errors import MaskfieldError, NanLoss, ValidationError
from .evaluation import cross_view_consistency, save_report, score
from .fields import load_grid, load_scene, save_grid, save_volume
from .geometry import load_cameras, load_prompts, propagate_prompts
from .gradcheck import OBJECTIVES, run_gradcheck
from .images import overlay, write_pgm, write_ppm
from .masks import (
    CorruptionSpec,
    MaskFrame,
    corrupt_masks,
    feature_filename,
    load_feature_frame,
    load_frame,
    mask_filename,
    project_gt_masks,
    store_frame,
)
from .render import normalized_depth, render_view

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _config_digest(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out_dir, command, config_doc, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config_hash": _config_digest(config_doc),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def _ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_mask_dir(directory):
    paths = sorted(Path(directory).glob("mask_*.snhq"))
    if not paths:
        raise ValidationError(f"no mask_*.snhq files in {directory}")
    return [load_frame(p) for p in paths], paths


def _load_feature_dir(directory):
    paths = sorted(Path(directory).glob("feature_*.snhq"))
    if not paths:
        raise ValidationError(f"no feature_*.snhq files in {directory}")
    return [load_feature_frame(p) for p in paths], paths


def _match_views(frames, cameras):
    """Frames and cameras paired by view id, in camera order."""
    by_id = {f.view_id: f for f in frames}
    pairs = [(by_id[c.view_id], c) for c in cameras if c.view_id in by_id]
    if not pairs:
        raise ValidationError("no camera/frame view ids in common")
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _scene_depth_fn(scene, n_samples):
    """DepthFn over the frozen scene for prompt lifting and visibility."""
    from .geometry import project_many, rays_for_pixels

    def fn(camera, pixels):
        px = pixels[:, 0]
        py = pixels[:, 1]
        origins, dirs, t0, t1, hit = rays_for_pixels(camera, px, py, scene.bbox)
        out = np.zeros(len(pixels))
        live = np.flatnonzero(hit)
        if live.size:
            from .render import sample_batch, stratified_samples

            t, delta = stratified_samples(t0[live], t1[live], n_samples, jitter=False)
            act = sample_batch(scene, origins[live], dirs[live], t, delta)
            t_surf = normalized_depth(act.composite(act.t), act.opacity)
            solid = t_surf > 0
            if solid.any():
                pts = origins[live][solid] + t_surf[solid, None] * dirs[live][solid]
                _, depths, _ = project_many(camera, pts)
                vals = np.zeros(live.size)
                vals[solid] = depths
                out[live] = vals
        return out

    return fn


def _load_field(prefix):
    meta_path = Path(str(prefix) + ".json")
    if not meta_path.exists():
        raise ValidationError(f"missing field metadata {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    return load_grid(str(prefix), int(meta["levels"]))


def _save_field(prefix, grid):
    paths = save_grid(str(prefix), grid)
    meta_path = Path(str(prefix) + ".json")
    with open(meta_path, "w") as f:
        json.dump(
            {
                "levels": len(grid.levels),
                "channels": grid.channels,
                "resolutions": [lv.resolution for lv in grid.levels],
            },
            f,
            indent=1,
        )
    return paths + [str(meta_path)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_scene_gen(args):
    started = time.perf_counter()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    out = _ensure_dir(args.out)
    outputs = []

    gt = project_gt_masks(scene, cameras, n_samples=args.samples)
    for cam, frame in zip(cameras, gt):
        imgs = render_view(scene, cam, n_samples=args.samples, want=("rgb", "depth", "opacity"))
        rgb_path = out / f"rgb_{cam.view_id:05d}.ppm"
        write_ppm(rgb_path, imgs["rgb"])
        depth = imgs["depth"]
        depth_path = out / f"depth_{cam.view_id:05d}.pgm"
        write_pgm(depth_path, depth / max(float(depth.max()), 1e-12))
        mask_path = out / mask_filename(cam.view_id)
        store_frame(frame, mask_path)
        outputs += [rgb_path, depth_path, mask_path]

    res = args.volume_res
    axes = [np.linspace(scene.bbox[0][a], scene.bbox[1][a], res) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    density = scene.sample_density(pts).reshape(res, res, res)
    albedo = scene.sample_color(pts).reshape(res, res, res, 3)
    labels = scene.gt_label(pts).reshape(res, res, res).astype(np.float64)
    for name, vol in (("density", density), ("albedo", albedo), ("labels", labels)):
        path = out / f"{name}.snhqvol"
        save_volume(path, vol, scene.bbox)
        outputs.append(path)

    cfg_doc = {"samples": args.samples, "volume_res": res}
    outputs.append(_write_manifest(out, "scene-gen", cfg_doc, args.seed, [args.scene, args.cameras], outputs, started))
    return EXIT_OK


def cmd_corrupt(args):
    started = time.perf_counter()
    frames, paths = _load_mask_dir(args.masks)
    spec = CorruptionSpec(
        boundary_dilate_px=args.dilate,
        boundary_erode_px=args.erode,
        flip_rate=args.flip_rate,
        drop_view_rate=args.drop_rate,
        blob_rate=args.blob_rate,
        blob_radius_px=args.blob_radius,
        seed=args.seed,
    )
    out = _ensure_dir(args.out)
    corrupted = corrupt_masks(frames, spec)
    outputs = []
    for frame in corrupted:
        path = out / mask_filename(frame.view_id)
        store_frame(frame, path)
        outputs.append(path)
    cfg_doc = {
        "dilate": args.dilate,
        "erode": args.erode,
        "flip_rate": args.flip_rate,
        "drop_rate": args.drop_rate,
        "blob_rate": args.blob_rate,
        "blob_radius": args.blob_radius,
    }
    outputs.append(_write_manifest(out, "corrupt", cfg_doc, args.seed, [str(p) for p in paths], outputs, started))
    return EXIT_OK


def _resolve_fusion_config(args, frames):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = FusionConfig(n_channels=frames[0].n_channels)
    cfg = cfg.with_overrides(
        n_channels=args.channels,
        iterations=args.iterations,
        warmup_iters=args.warmup,
        global_batch=args.batch,
        samples_per_ray=args.samples,
        lr=args.lr,
        tau=args.tau,
        seed=args.seed,
    )
    if args.no_rgb_loss:
        cfg = cfg.with_overrides(warmup_iters=cfg.iterations)
    return cfg


def cmd_fuse(args):
    started = time.perf_counter()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    frames, _ = _load_mask_dir(args.masks)
    frames, cameras = _match_views(frames, cameras)
    cfg = _resolve_fusion_config(args, frames)

    if args.prompts:
        prompts = load_prompts(args.prompts, cameras, _scene_depth_fn(scene, cfg.samples_per_ray))
        visibility = propagate_prompts(prompts, cameras, _scene_depth_fn(scene, cfg.samples_per_ray), cfg.eps_vis)
        from .geometry import filter_views

        retained = filter_views(visibility, k_min=args.k_min)
        cameras = [cameras[i] for i in retained]
        frames = [frames[i] for i in retained]

    grid, trace = train_object_field(scene, frames, cameras, cfg, workers=args.threads)

    out = _ensure_dir(args.out)
    outputs = _save_field(out / "field", grid)
    trace_path = out / "trace.csv"
    write_trace(trace_path, trace)
    cfg_path = out / "resolved_config.json"
    from .aggregator import save_config

    save_config(cfg_path, cfg)
    outputs += [str(trace_path), str(cfg_path)]
    inputs = [args.scene, args.cameras, args.masks] + ([args.prompts] if args.prompts else [])
    outputs.append(_write_manifest(out, "fuse", cfg.to_dict(), cfg.seed, inputs, outputs, started))
    return EXIT_OK


def cmd_render(args):
    started = time.perf_counter()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    grid = _load_field(args.field)
    what = [w.strip() for w in args.what.split(",") if w.strip()]
    unknown = set(what) - {"masks", "rgb", "depth", "overlays", "probs"}
    if unknown:
        raise ValidationError(f"unknown render outputs: {sorted(unknown)}")
    out = _ensure_dir(args.out)
    outputs = []
    for cam in cameras:
        want = ["mask"]
        if "rgb" in what or "overlays" in what:
            want.append("rgb")
        if "depth" in what:
            want.append("depth")
        imgs = render_view(scene, cam, field=grid, n_samples=args.samples, want=tuple(want))
        probs = imgs["mask"]
        if "masks" in what:
            path = out / mask_filename(cam.view_id)
            store_frame(MaskFrame(view_id=cam.view_id, probs=probs), path)
            outputs.append(path)
        if "overlays" in what:
            path = out / f"overlay_{cam.view_id:05d}.ppm"
            write_ppm(path, overlay(imgs["rgb"], probs.argmax(axis=2)))
            outputs.append(path)
        if "rgb" in what:
            path = out / f"rgb_{cam.view_id:05d}.ppm"
            write_ppm(path, imgs["rgb"])
            outputs.append(path)
        if "depth" in what:
            path = out / f"depth_{cam.view_id:05d}.pgm"
            depth = imgs["depth"]
            write_pgm(path, depth / max(float(depth.max()), 1e-12))
            outputs.append(path)
        if "probs" in what:
            for ch in range(probs.shape[2]):
                path = out / f"prob_{cam.view_id:05d}_c{ch}.pgm"
                write_pgm(path, probs[:, :, ch])
                outputs.append(path)
    cfg_doc = {"what": what, "samples": args.samples}
    outputs.append(_write_manifest(out, "render", cfg_doc, args.seed, [args.scene, args.cameras, args.field], outputs, started))
    return EXIT_OK


def cmd_eval(args):
    started = time.perf_counter()
    pred, _ = _load_mask_dir(args.pred)
    gt, _ = _load_mask_dir(args.gt)
    pred_by_id = {f.view_id: f for f in pred}
    pairs = [(pred_by_id[g.view_id], g) for g in gt if g.view_id in pred_by_id]
    if not pairs:
        raise ValidationError("no common view ids between pred and gt")
    object_ids = [int(x) for x in args.objects.split(",")] if args.objects else None
    report = score([p for p, _ in pairs], [g for _, g in pairs], object_ids)
    out_path = Path(args.out)
    _ensure_dir(out_path.parent if out_path.suffix else out_path)
    if not out_path.suffix:
        out_path = out_path / "report.json"
    save_report(out_path, report)
    print(f"miou={report.miou:.4f} mean_acc={report.mean_acc:.4f} views={report.views_used}")
    _write_manifest(out_path.parent, "eval", {"objects": object_ids}, args.seed, [args.pred, args.gt], [out_path], started)
    return EXIT_OK


def cmd_consistency(args):
    started = time.perf_counter()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    grid = _load_field(args.field)
    if args.pairs:
        pairs = []
        for chunk in args.pairs.split(","):
            a, b = chunk.split(":")
            pairs.append((int(a), int(b)))
    else:
        rng = np.random.default_rng(args.seed)
        pairs = []
        for _ in range(args.num_pairs):
            a, b = rng.choice(len(cameras), size=2, replace=False)
            pairs.append((int(a), int(b)))
    report = cross_view_consistency(
        scene, grid, cameras, pairs, samples_per_pair=args.samples_per_pair, n_samples=args.samples, seed=args.seed
    )
    out_path = Path(args.out)
    _ensure_dir(out_path.parent if out_path.suffix else out_path)
    if not out_path.suffix:
        out_path = out_path / "report.json"
    save_report(out_path, report)
    print(f"agreement={report.agreement:.4f} compared={report.compared} pairs={report.pairs}")
    _write_manifest(
        out_path.parent,
        "consistency",
        {"pairs": [list(p) for p in pairs], "samples_per_pair": args.samples_per_pair},
        args.seed,
        [args.scene, args.cameras, args.field],
        [out_path],
        started,
    )
    return EXIT_OK


def cmd_distill(args):
    started = time.perf_counter()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    frames, _ = _load_feature_dir(args.features)
    frames, cameras = _match_views(frames, cameras)
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = FusionConfig(n_channels=frames[0].n_channels)
    cfg = cfg.with_overrides(iterations=args.iterations, global_batch=args.batch, samples_per_ray=args.samples, lr=args.lr, seed=args.seed)
    grid, trace = distill_feature_field(scene, frames, cameras, cfg, workers=args.threads)
    out = _ensure_dir(args.out)
    outputs = _save_field(out / "feature_field", grid)
    trace_path = out / "trace.csv"
    with open(trace_path, "w") as f:
        f.write("iteration,mse\n")
        for it, mse in trace:
            f.write(f"{it},{mse!r}\n")
    outputs.append(str(trace_path))
    outputs.append(_write_manifest(out, "distill", cfg.to_dict(), cfg.seed, [args.scene, args.cameras, args.features], outputs, started))
    return EXIT_OK


def cmd_gradcheck(args):
    started = time.perf_counter()
    objectives = tuple(o.strip() for o in args.objectives.split(",") if o.strip())
    unknown = set(objectives) - set(OBJECTIVES)
    if unknown:
        raise ValidationError(f"unknown objectives: {sorted(unknown)}")
    report = run_gradcheck(n_configs=args.configs, seed=args.seed, tol=args.tol, objectives=objectives)
    for objective in objectives:
        print(f"{objective}: worst rel err {report.worst[objective]:.3e}")
    print(f"{'PASS' if report.passed else 'FAIL'} ({report.configs} configs, {report.runtime_s:.1f}s)")
    if args.out:
        out_path = Path(args.out)
        if out_path.parent != Path("."):
            _ensure_dir(out_path.parent)
        with open(out_path, "w") as f:
            json.dump(report.to_dict(), f, indent=1)
        _write_manifest(out_path.parent, "gradcheck", {"configs": args.configs, "tol": args.tol, "objectives": list(objectives)}, args.seed, [], [out_path], started)
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def _default_threads():
    env = os.environ.get("SNHQ_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskfield", description="Multi-view mask fusion over a frozen density field.")
    parser.add_argument("--version", action="version", version=f"maskfield {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=False):
        p.add_argument("--seed", type=int, default=0)
        if threads:
            p.add_argument("--threads", type=int, default=_default_threads(), help="worker threads (env SNHQ_THREADS)")

    p = sub.add_parser("scene-gen", help="render RGB/depth/ground-truth masks and volumes for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--volume-res", type=int, default=64)
    common(p)
    p.set_defaults(fn=cmd_scene_gen)

    p = sub.add_parser("corrupt", help="apply synthetic segmenter noise to mask frames")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dilate", type=int, default=0)
    p.add_argument("--erode", type=int, default=0)
    p.add_argument("--flip-rate", type=float, default=0.0)
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--blob-rate", type=float, default=0.0)
    p.add_argument("--blob-radius", type=int, default=3)
    common(p)
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("fuse", help="train the object field from mask frames")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="fusion config JSON; flags override")
    p.add_argument("--prompts", help="prompts JSON for view filtering")
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--channels", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--no-rgb-loss", action="store_true")
    common(p, threads=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("render", help="render frames from a trained field")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--field", required=True, help="field path prefix (from fuse: <out>/field)")
    p.add_argument("--out", required=True)
    p.add_argument("--what", default="masks,overlays")
    p.add_argument("--samples", type=int, default=128)
    common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="score predicted mask frames against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objects", help="comma-separated object ids")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("consistency", help="cross-view label agreement of a trained field")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", help="explicit pairs a:b,c:d (camera indices)")
    p.add_argument("--num-pairs", type=int, default=10)
    p.add_argument("--samples-per-pair", type=int, default=512)
    p.add_argument("--samples", type=int, default=128)
    common(p)
    p.set_defaults(fn=cmd_consistency)

    p = sub.add_parser("distill", help="fit a feature field to per-view feature frames")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--lr", type=float)
    common(p, threads=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--objectives", default=",".join(OBJECTIVES))
    p.add_argument("--out", help="optional report JSON path")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NanLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except MaskfieldError as e:
        print(f"error [{e.code}]: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"error [IO]: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
