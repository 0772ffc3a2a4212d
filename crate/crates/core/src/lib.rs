//! Adversarial wearable patches against grid-based person detectors.
//!
//! The crate synthesises patches by minimising a detector's best person
//! confidence, plus smoothness and printability penalties, in expectation
//! over random conventional (scale, rotation, brightness, noise) and 3D
//! (wrinkle, cylinder curvature, viewing angle, occlusion) transformations.
//! It also evaluates stealth-attack success digitally, on photo/frame
//! batches and across initialisation sweeps.

pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod optim;
pub mod palette;
pub mod patch;
pub mod rng;
pub mod scene;
pub mod synthetic;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use image::RgbImage;
pub use palette::Palette;
pub use patch::{clamp_unit, new_patch, InitSpec, Patch};
pub use rng::SeedableRng;
pub use scene::{load_scene_set, PersonBox, Scene, SceneSet, SplitTag};
