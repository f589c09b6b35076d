"""maskfield: multi-view 2D mask fusion into a consistent 3D object field.

A frozen density/color scene supplies geometry; a trainable multi-level
voxel grid learns per-point object identity logits from noisy per-view
masks via volumetric compositing, cross-entropy aggregation, and an
error-guided ray-pair color loss.  Everything is deterministic under a
seed, including multi-worker training.
"""

from .aggregator import (
    ErrorMapSet,
    FusionConfig,
    cross_entropy,
    distill_feature_field,
    load_config,
    mask_distance,
    ray_pair_rgb_loss,
    rgb_similarity,
    save_config,
    train_object_field,
    update_error_map,
    write_trace,
)
from .errors import MaskfieldError
from .evaluation import ConsistencyReport, EvalReport, cross_view_consistency, per_view_miou, score
from .fields import DensityColorScene, Primitive, TrainableGrid, load_grid, load_scene, load_volume, save_grid, save_scene, save_volume
from .geometry import (
    Camera,
    Convention,
    Prompt3D,
    Ray,
    filter_views,
    intersect_aabb,
    load_cameras,
    load_prompts,
    project,
    propagate_prompts,
    ray_for_pixel,
    rays_for_pixels,
    save_cameras,
    unproject,
)
from .gradcheck import run_gradcheck
from .masks import (
    CorruptionSpec,
    FeatureFrame,
    MaskFrame,
    corrupt_masks,
    load_feature_frame,
    load_frame,
    project_feature_frames,
    project_gt_masks,
    store_feature_frame,
    store_frame,
)
from .render import composite_payload, composite_weights, oracle_composite, render_view, stratified_samples

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Convention",
    "CorruptionSpec",
    "ConsistencyReport",
    "DensityColorScene",
    "ErrorMapSet",
    "EvalReport",
    "FeatureFrame",
    "FusionConfig",
    "MaskFrame",
    "MaskfieldError",
    "Primitive",
    "Prompt3D",
    "Ray",
    "TrainableGrid",
    "composite_payload",
    "composite_weights",
    "corrupt_masks",
    "cross_entropy",
    "cross_view_consistency",
    "distill_feature_field",
    "filter_views",
    "intersect_aabb",
    "load_cameras",
    "load_config",
    "load_feature_frame",
    "load_frame",
    "load_grid",
    "load_prompts",
    "load_scene",
    "load_volume",
    "mask_distance",
    "oracle_composite",
    "per_view_miou",
    "project",
    "project_feature_frames",
    "project_gt_masks",
    "propagate_prompts",
    "ray_for_pixel",
    "ray_pair_rgb_loss",
    "rays_for_pixels",
    "render_view",
    "rgb_similarity",
    "run_gradcheck",
    "save_cameras",
    "save_config",
    "save_grid",
    "save_scene",
    "save_volume",
    "score",
    "store_feature_frame",
    "store_frame",
    "stratified_samples",
    "train_object_field",
    "unproject",
    "update_error_map",
    "write_trace",
]
