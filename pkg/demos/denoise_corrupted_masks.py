"""Show the fusion averaging away per-view segmentation noise.

A third of the training masks get heavy synthetic damage (boundary dilation,
random label flips, spurious discs).  View-inconsistent errors cancel when
many rays vote for the same cell of 3D space, so the fused field scores far
above the damaged inputs.
"""

import numpy as np

from maskfield.aggregator import FusionConfig, train_object_field
from maskfield.evaluation import per_view_miou, score
from maskfield.masks import CorruptionSpec, MaskFrame, corrupt_masks, project_gt_masks
from maskfield.presets import two_sphere_fixture
from maskfield.render import render_view


def main():
    scene, train_cams, test_cams = two_sphere_fixture(n_train=20, n_test=5, width=64, height=64, focal=58.0)
    train_frames = project_gt_masks(scene, train_cams)
    test_frames = project_gt_masks(scene, test_cams)

    n_bad = len(train_frames) // 3
    spec = CorruptionSpec(boundary_dilate_px=3, flip_rate=0.1, blob_rate=0.02, seed=21)
    damaged = corrupt_masks(train_frames[:n_bad], spec)
    quality = per_view_miou(damaged, train_frames[:n_bad])
    print(f"damaged {n_bad}/{len(train_frames)} views; their per-view mIoU: "
          f"mean {np.mean(quality):.3f}, worst {min(quality):.3f}")

    cfg = FusionConfig(n_channels=3, iterations=300, warmup_iters=150, global_batch=2048,
                       samples_per_ray=96, grid_levels=(16, 64), seed=0)
    grid, _ = train_object_field(scene, damaged + train_frames[n_bad:], train_cams, cfg)

    pred = [
        MaskFrame(c.view_id, render_view(scene, c, field=grid, n_samples=96, want=("mask",))["mask"])
        for c in test_cams
    ]
    fused = score(pred, test_frames).miou
    print(f"fused held-out mIoU {fused:.4f} "
          f"(beats the damaged inputs by {fused - float(np.mean(quality)):+.3f})")


if __name__ == "__main__":
    main()
