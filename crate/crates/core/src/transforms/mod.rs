//! Differentiable patch transformations (conventional family, 3D family),
//! the EOT sampler and batch compositing.

mod batch;
mod params;
mod pipeline;
mod warp;

pub use batch::{
    batch_apply, composite_scene, read_params_log, replay_batch, write_params_log, Batch,
    ParamsRecord, COMPOSITION_ORDER,
};
pub use params::{
    sample_transform_params, sample_with, AngleParams, EnableFlags, EotConfig, OcclusionFill,
    OcclusionParams, PlacementParams, Range, TransformParams, Variant, WrinkleParams,
};
pub use pipeline::{
    apply_3d, apply_conventional, occlusion_mask, occlusion_rect, place_patch, target_rect,
    transform_patch, BoxComposite, MaskedImage, PixelRect, Placement, SceneComposite, Tape,
    WRINKLE_SHADING,
};
pub use warp::{Border, Resampler};
