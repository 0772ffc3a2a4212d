//! The optimised patch and its initialisation.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::SeedableRng;

/// Physical height:width ratio of the printed patch (43 cm x 29 cm).
pub const DEFAULT_ASPECT: f64 = 43.0 / 29.0;

/// Default digital resolution, height x width.
pub const DEFAULT_SIZE: (usize, usize) = (300, 200);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    Random { seed: u64 },
    Constant { rgb: [f64; 3] },
    FromImage { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pixels: RgbImage,
    aspect_hint: f64,
}

impl Patch {
    /// Wraps an image as a patch, clamping every component into `[0, 1]`.
    pub fn from_image(mut pixels: RgbImage) -> Result<Self> {
        check_dims(pixels.height(), pixels.width())?;
        clamp_slice(pixels.data_mut());
        Ok(Self {
            pixels,
            aspect_hint: DEFAULT_ASPECT,
        })
    }

    pub fn with_aspect_hint(mut self, aspect: f64) -> Result<Self> {
        if !(aspect.is_finite() && aspect > 0.0) {
            return Err(Error::Config(format!(
                "aspect hint must be positive, got {aspect}"
            )));
        }
        self.aspect_hint = aspect;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn aspect_hint(&self) -> f64 {
        self.aspect_hint
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    /// Applies `f` to the raw pixel buffer and re-projects onto the unit cube.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(self.pixels.data_mut());
        clamp_slice(self.pixels.data_mut());
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.pixels.save_png16(path)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_image(RgbImage::load(path)?)
    }
}

/// Parses `random:<seed>`, `constant:<r>,<g>,<b>` or `image:<path>`.
impl std::str::FromStr for InitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "patch init {s:?}: expected random:<seed>, constant:<r>,<g>,<b> or image:<path>"
            ))
        };
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "random" => Ok(InitSpec::Random {
                seed: arg.trim().parse().map_err(|_| bad())?,
            }),
            "constant" => {
                let v: Vec<f64> = arg
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                let rgb: [f64; 3] = v.try_into().map_err(|_| bad())?;
                Ok(InitSpec::Constant { rgb })
            }
            "image" if !arg.is_empty() => Ok(InitSpec::FromImage { path: arg.into() }),
            _ => Err(bad()),
        }
    }
}

pub fn new_patch(height_px: usize, width_px: usize, init: &InitSpec) -> Result<Patch> {
    check_dims(height_px, width_px)?;
    let pixels = match init {
        InitSpec::Random { seed } => {
            let mut rng = SeedableRng::new(*seed).stream();
            let data = (0..height_px * width_px * 3)
                .map(|_| rng.gen::<f64>())
                .collect();
            RgbImage::from_raw(height_px, width_px, data)?
        }
        InitSpec::Constant { rgb } => RgbImage::filled(height_px, width_px, *rgb),
        InitSpec::FromImage { path } => RgbImage::load(path)?.resize_bilinear(height_px, width_px),
    };
    Patch::from_image(pixels)
}

/// Projects every component onto `[0, 1]`.
pub fn clamp_unit(mut patch: Patch) -> Patch {
    clamp_slice(patch.pixels.data_mut());
    patch
}

pub(crate) fn clamp_slice(data: &mut [f64]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::Dimensions {
            height,
            width,
            reason: "patch needs at least 2x2 pixels",
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_spec_parses() {
        assert_eq!(
            "random:7".parse::<InitSpec>().unwrap(),
            InitSpec::Random { seed: 7 }
        );
        assert_eq!(
            "constant:1,0,0.5".parse::<InitSpec>().unwrap(),
            InitSpec::Constant {
                rgb: [1.0, 0.0, 0.5]
            }
        );
        assert_eq!(
            "image:a/b.png".parse::<InitSpec>().unwrap(),
            InitSpec::FromImage {
                path: "a/b.png".into()
            }
        );
        assert!("constant:1,0".parse::<InitSpec>().is_err());
        assert!("blob".parse::<InitSpec>().is_err());
    }

    #[test]
    fn constant_fill() {
        let p = new_patch(
            4,
            4,
            &InitSpec::Constant {
                rgb: [1.0, 0.0, 0.0],
            },
        )
        .unwrap();
        assert_eq!((p.height(), p.width()), (4, 4));
        assert!(p.data().chunks(3).all(|px| px == [1.0, 0.0, 0.0]));
        assert_eq!(p.aspect_hint(), 43.0 / 29.0);
    }

    #[test]
    fn random_is_deterministic() {
        let a = new_patch(2, 2, &InitSpec::Random { seed: 7 }).unwrap();
        let b = new_patch(2, 2, &InitSpec::Random { seed: 7 }).unwrap();
        let bits = |p: &Patch| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = new_patch(2, 2, &InitSpec::Random { seed: 8 }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn random_stream_regression() {
        // First eight components drawn for seed 7.
        let p = new_patch(2, 2, &InitSpec::Random { seed: 7 }).unwrap();
        let got: Vec<f64> = p.data()[..8].to_vec();
        assert_eq!(got, RANDOM_SEED7_FIRST8.to_vec());
    }

    const RANDOM_SEED7_FIRST8: [f64; 8] = [
        0.023335618701175953,
        0.534607713771065,
        0.9513860614315212,
        0.2838102968251651,
        0.18501672720320028,
        0.409909348558246,
        0.49067109280768395,
        0.8241608591426188,
    ];

    #[test]
    fn rejects_degenerate_dims() {
        assert!(new_patch(0, 4, &InitSpec::Constant { rgb: [0.0; 3] }).is_err());
        assert!(new_patch(1, 4, &InitSpec::Constant { rgb: [0.0; 3] }).is_err());
    }

    #[test]
    fn constant_outside_unit_is_clamped() {
        let p = new_patch(
            2,
            2,
            &InitSpec::Constant {
                rgb: [1.5, -0.5, 0.5],
            },
        )
        .unwrap();
        assert_eq!(p.pixels().get(1, 1), [1.0, 0.0, 0.5]);
    }

    #[test]
    fn clamp_cases() {
        let img = RgbImage::from_raw(
            2,
            2,
            vec![1.3, -0.2, 0.5, 0.0, 1.0, 0.25, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        )
        .unwrap();
        let mut p = Patch::from_image(RgbImage::new(2, 2)).unwrap();
        p.pixels = img;
        let c = clamp_unit(p);
        assert_eq!(&c.data()[..3], &[1.0, 0.0, 0.5]);
        let again = clamp_unit(c.clone());
        assert_eq!(again, c);
    }

    #[test]
    fn missing_image_file_errors() {
        let err = new_patch(
            4,
            4,
            &InitSpec::FromImage {
                path: "/nonexistent/x.png".into(),
            },
        );
        assert!(matches!(err, Err(Error::ImageDecode { .. })));
    }
}
