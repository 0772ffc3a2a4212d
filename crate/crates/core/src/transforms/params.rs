//! Transformation parameters and the EOT sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedableRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        self.lo + (self.hi - self.lo) * u
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::Config(format!(
                "range {name} = [{}, {}] is not well-ordered",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrinkleParams {
    pub grid_size: usize,
    pub amp_px: f64,
    pub field_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleParams {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    /// Occluded share of the patch area, in `[0, 0.3]`.
    pub fraction: f64,
    pub rect_seed: u64,
    pub fill_rgb: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementParams {
    /// Patch width as a share of the person-box width.
    pub alpha: f64,
    /// Vertical patch centre as a share of box height from the box top.
    pub v_anchor: f64,
}

/// One concrete draw of the conventional and 3D transformation families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub scale: f64,
    pub rotate_deg: f64,
    pub brightness_add: f64,
    pub contrast_mul: f64,
    pub noise_seed: u64,
    pub noise_amp: f64,
    pub wrinkle: WrinkleParams,
    /// Angular half-extent of the cylinder the patch wraps, in radians.
    pub curvature: f64,
    pub angle: AngleParams,
    pub occlusion: OcclusionParams,
    pub placement: PlacementParams,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotate_deg: 0.0,
            brightness_add: 0.0,
            contrast_mul: 1.0,
            noise_seed: 0,
            noise_amp: 0.0,
            wrinkle: WrinkleParams {
                grid_size: 5,
                amp_px: 0.0,
                field_seed: 0,
            },
            curvature: 0.0,
            angle: AngleParams {
                yaw_deg: 0.0,
                pitch_deg: 0.0,
            },
            occlusion: OcclusionParams {
                fraction: 0.0,
                rect_seed: 0,
                fill_rgb: [0.0; 3],
            },
            placement: PlacementParams {
                alpha: 0.6,
                v_anchor: 0.45,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..=0.3).contains(&self.occlusion.fraction) {
            return Err(Error::Config(format!(
                "occlusion fraction must lie in [0, 0.3], got {}",
                self.occlusion.fraction
            )));
        }
        if self.wrinkle.grid_size < 2 {
            return Err(Error::Config(
                "wrinkle grid needs at least 2 nodes per side".into(),
            ));
        }
        if !(self.placement.alpha > 0.0) {
            return Err(Error::Config(format!(
                "placement alpha must be positive, got {}",
                self.placement.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionFill {
    /// A uniform random colour per sample.
    Random,
    Constant([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnableFlags {
    pub scale: bool,
    pub rotate: bool,
    pub brightness: bool,
    pub contrast: bool,
    pub noise: bool,
    pub wrinkle: bool,
    pub radian: bool,
    pub angle: bool,
    pub occlusion: bool,
}

impl EnableFlags {
    pub const NONE: Self = Self {
        scale: false,
        rotate: false,
        brightness: false,
        contrast: false,
        noise: false,
        wrinkle: false,
        radian: false,
        angle: false,
        occlusion: false,
    };

    pub const CONVENTIONAL: Self = Self {
        scale: true,
        rotate: true,
        brightness: true,
        contrast: true,
        noise: true,
        ..Self::NONE
    };

    pub const ALL: Self = Self {
        wrinkle: true,
        radian: true,
        angle: true,
        occlusion: true,
        ..Self::CONVENTIONAL
    };

    pub fn any(&self) -> bool {
        [
            self.scale,
            self.rotate,
            self.brightness,
            self.contrast,
            self.noise,
            self.wrinkle,
            self.radian,
            self.angle,
            self.occlusion,
        ]
        .into_iter()
        .any(|b| b)
    }
}

impl Default for EnableFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EotConfig {
    pub enabled: EnableFlags,
    pub scale: Range,
    pub rotate_deg: Range,
    pub brightness_add: Range,
    pub contrast_mul: Range,
    pub noise_amp: Range,
    pub wrinkle_grid: usize,
    pub wrinkle_amp_px: Range,
    pub curvature: Range,
    pub yaw_deg: Range,
    pub pitch_deg: Range,
    pub occlusion_fraction: Range,
    pub occlusion_fill: OcclusionFill,
    pub alpha: Range,
    pub v_anchor: Range,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            enabled: EnableFlags::ALL,
            scale: Range::new(0.8, 1.2),
            rotate_deg: Range::new(-20.0, 20.0),
            brightness_add: Range::new(-0.1, 0.1),
            contrast_mul: Range::new(0.8, 1.2),
            noise_amp: Range::fixed(0.1),
            wrinkle_grid: 5,
            wrinkle_amp_px: Range::new(0.0, 6.0),
            curvature: Range::new(0.0, std::f64::consts::FRAC_PI_6),
            yaw_deg: Range::new(-30.0, 30.0),
            pitch_deg: Range::new(-10.0, 10.0),
            occlusion_fraction: Range::new(0.0, 0.25),
            occlusion_fill: OcclusionFill::Random,
            alpha: Range::fixed(0.6),
            v_anchor: Range::fixed(0.45),
        }
    }
}

/// The six patch variants: conventional only, one 3D family each, all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Conventional,
    Radian,
    Wrinkle,
    Angle,
    Occlusion,
    Combined,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conventional" => Variant::Conventional,
            "radian" => Variant::Radian,
            "wrinkle" => Variant::Wrinkle,
            "angle" => Variant::Angle,
            "occlusion" => Variant::Occlusion,
            "combined" => Variant::Combined,
            other => {
                return Err(Error::Config(format!(
                    "unknown transform variant {other:?}"
                )))
            }
        })
    }
}

impl EotConfig {
    pub fn identity() -> Self {
        Self {
            enabled: EnableFlags::NONE,
            ..Self::default()
        }
    }

    pub fn variant(v: Variant) -> Self {
        let conv = EnableFlags::CONVENTIONAL;
        let enabled = match v {
            Variant::Conventional => conv,
            Variant::Radian => EnableFlags {
                radian: true,
                ..conv
            },
            Variant::Wrinkle => EnableFlags {
                wrinkle: true,
                ..conv
            },
            Variant::Angle => EnableFlags {
                angle: true,
                ..conv
            },
            Variant::Occlusion => EnableFlags {
                occlusion: true,
                ..conv
            },
            Variant::Combined => EnableFlags::ALL,
        };
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("scale", self.scale),
            ("rotate_deg", self.rotate_deg),
            ("brightness_add", self.brightness_add),
            ("contrast_mul", self.contrast_mul),
            ("noise_amp", self.noise_amp),
            ("wrinkle_amp_px", self.wrinkle_amp_px),
            ("curvature", self.curvature),
            ("yaw_deg", self.yaw_deg),
            ("pitch_deg", self.pitch_deg),
            ("occlusion_fraction", self.occlusion_fraction),
            ("alpha", self.alpha),
            ("v_anchor", self.v_anchor),
        ] {
            r.check(name)?;
        }
        if !self.enabled.any() {
            return Err(Error::Config(
                "at least one sub-transform must be enabled".into(),
            ));
        }
        if self.scale.lo <= 0.0 {
            return Err(Error::Config("scale range must be positive".into()));
        }
        if self.occlusion_fraction.lo < 0.0 || self.occlusion_fraction.hi > 0.3 {
            return Err(Error::Config(
                "occlusion fraction range must lie in [0, 0.3]".into(),
            ));
        }
        if self.alpha.lo <= 0.0 {
            return Err(Error::Config("placement alpha must be positive".into()));
        }
        if self.wrinkle_grid < 2 {
            return Err(Error::Config(
                "wrinkle grid needs at least 2 nodes per side".into(),
            ));
        }
        if self.curvature.lo < 0.0 || self.curvature.hi > std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config("curvature must lie in [0, pi/2]".into()));
        }
        Ok(())
    }
}

/// Draws one parameter set. Every field is drawn in a fixed order whether
/// or not its family is enabled, so toggling one family does not shift the
/// others; disabled families are then reset to identity.
pub fn sample_transform_params(cfg: &EotConfig, rng: &mut impl Rng) -> TransformParams {
    let scale = cfg.scale.draw(rng);
    let rotate_deg = cfg.rotate_deg.draw(rng);
    let brightness_add = cfg.brightness_add.draw(rng);
    let contrast_mul = cfg.contrast_mul.draw(rng);
    let noise_seed: u64 = rng.gen();
    let noise_amp = cfg.noise_amp.draw(rng);
    let amp_px = cfg.wrinkle_amp_px.draw(rng);
    let field_seed: u64 = rng.gen();
    let curvature = cfg.curvature.draw(rng);
    let yaw_deg = cfg.yaw_deg.draw(rng);
    let pitch_deg = cfg.pitch_deg.draw(rng);
    let fraction = cfg.occlusion_fraction.draw(rng);
    let rect_seed: u64 = rng.gen();
    let random_fill: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let alpha = cfg.alpha.draw(rng);
    let v_anchor = cfg.v_anchor.draw(rng);

    let on = cfg.enabled;
    let id = TransformParams::identity();
    TransformParams {
        scale: if on.scale { scale } else { id.scale },
        rotate_deg: if on.rotate { rotate_deg } else { id.rotate_deg },
        brightness_add: if on.brightness {
            brightness_add
        } else {
            id.brightness_add
        },
        contrast_mul: if on.contrast {
            contrast_mul
        } else {
            id.contrast_mul
        },
        noise_seed,
        noise_amp: if on.noise { noise_amp } else { 0.0 },
        wrinkle: WrinkleParams {
            grid_size: cfg.wrinkle_grid,
            amp_px: if on.wrinkle { amp_px } else { 0.0 },
            field_seed,
        },
        curvature: if on.radian { curvature } else { 0.0 },
        angle: if on.angle {
            AngleParams { yaw_deg, pitch_deg }
        } else {
            id.angle
        },
        occlusion: OcclusionParams {
            fraction: if on.occlusion { fraction } else { 0.0 },
            rect_seed,
            fill_rgb: match cfg.occlusion_fill {
                OcclusionFill::Random => random_fill,
                OcclusionFill::Constant(rgb) => rgb,
            },
        },
        placement: PlacementParams { alpha, v_anchor },
    }
}

/// Convenience wrapper drawing from a fresh stream of `rng`.
pub fn sample_with(cfg: &EotConfig, rng: &SeedableRng) -> TransformParams {
    sample_transform_params(cfg, &mut rng.stream())
}
