//! Grid-detector interface: raw output tensors, decoding, person scores,
//! NMS-based decisions and a small differentiable toy network.

mod grid;
mod nms;
pub mod pretrain;
pub mod toy;

pub use grid::{
    decode_backward, decode_grid, extract_person_score, logistic, person_score_argmax, softmax,
    BoxScore, DetectionGrid, GridGrad,
};
pub use nms::{detect, detect_persons, iou, Detection};
pub use toy::ToyDetector;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::transforms::Resampler;

/// How a box's person confidence is formed from its decoded probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `P_obj * P(person)`
    #[default]
    Product,
    /// `P(person)` alone.
    ClassOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorDescriptor {
    /// Grid side `S`.
    pub grid: usize,
    /// Anchors per cell `B`.
    pub boxes_per_cell: usize,
    /// Class count `C`.
    pub classes: usize,
    /// `(height, width)` expected by `forward`.
    pub input_size: (usize, usize),
    pub person_class: usize,
    /// Anchor `(w, h)` per box slot, in grid-cell units.
    pub anchors: Vec<[f64; 2]>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl DetectorDescriptor {
    pub fn box_count(&self) -> usize {
        self.grid * self.grid * self.boxes_per_cell
    }

    pub fn box_stride(&self) -> usize {
        5 + self.classes
    }

    pub fn raw_len(&self) -> usize {
        self.box_count() * self.box_stride()
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class{class}"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.boxes_per_cell == 0 || self.classes == 0 {
            return Err(Error::Detector(
                "grid, boxes_per_cell and classes must be positive".into(),
            ));
        }
        if self.anchors.len() != self.boxes_per_cell {
            return Err(Error::Detector(format!(
                "{} anchors for {} boxes per cell",
                self.anchors.len(),
                self.boxes_per_cell
            )));
        }
        if self.person_class >= self.classes {
            return Err(Error::Detector(format!(
                "person class {} out of range for {} classes",
                self.person_class, self.classes
            )));
        }
        Ok(())
    }
}

/// `S x S x B x (5 + C)` detector output: per box `tx, ty, tw, th`,
/// objectness logit, then `C` class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGridOutput {
    pub grid: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl RawGridOutput {
    pub fn zeros(desc: &DetectorDescriptor) -> Self {
        Self {
            grid: desc.grid,
            boxes_per_cell: desc.boxes_per_cell,
            classes: desc.classes,
            data: vec![0.0; desc.raw_len()],
        }
    }

    pub fn box_count(&self) -> usize {
        self.grid * self.grid * self.boxes_per_cell
    }

    pub fn box_stride(&self) -> usize {
        5 + self.classes
    }

    /// The `5 + C` values of box `index` (row-major over cells, then anchor).
    pub fn box_values(&self, index: usize) -> &[f64] {
        let s = self.box_stride();
        &self.data[index * s..(index + 1) * s]
    }

    pub fn box_values_mut(&mut self, index: usize) -> &mut [f64] {
        let s = self.box_stride();
        &mut self.data[index * s..(index + 1) * s]
    }

    pub fn check_against(&self, desc: &DetectorDescriptor) -> Result<()> {
        if self.grid != desc.grid
            || self.boxes_per_cell != desc.boxes_per_cell
            || self.classes != desc.classes
            || self.data.len() != desc.raw_len()
        {
            return Err(Error::Shape {
                expected: format!(
                    "{0}x{0}x{1}x{2} ({3} values)",
                    desc.grid,
                    desc.boxes_per_cell,
                    desc.box_stride(),
                    desc.raw_len()
                ),
                actual: format!(
                    "{0}x{0}x{1}x{2} ({3} values)",
                    self.grid,
                    self.boxes_per_cell,
                    self.box_stride(),
                    self.data.len()
                ),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw grid output".into()));
        }
        Ok(())
    }
}

/// A differentiable grid detector.
///
/// `forward` must be deterministic. `backward` returns the vector-Jacobian
/// product of `forward` at `image` with `upstream`, i.e. the gradient with
/// respect to input pixels of `sum(upstream * forward(image))`.
pub trait DetectorAdapter: Send + Sync {
    fn descriptor(&self) -> &DetectorDescriptor;

    fn forward(&self, image: &RgbImage) -> Result<RawGridOutput>;

    fn backward(&self, image: &RgbImage, upstream: &RawGridOutput) -> Result<RgbImage>;

    fn check_input(&self, image: &RgbImage) -> Result<()> {
        let (h, w) = self.descriptor().input_size;
        if image.height() != h || image.width() != w {
            return Err(Error::Shape {
                expected: format!("{h}x{w} input"),
                actual: format!("{}x{}", image.height(), image.width()),
            });
        }
        Ok(())
    }
}

/// A scene image brought to the detector's input size.
#[derive(Debug, Clone)]
pub struct FittedInput {
    pub image: RgbImage,
    /// `None` when the image already had the input size.
    pub resize: Option<Resampler>,
}

impl FittedInput {
    pub fn new(desc: &DetectorDescriptor, image: &RgbImage) -> Self {
        let (h, w) = desc.input_size;
        if image.height() == h && image.width() == w {
            return Self {
                image: image.clone(),
                resize: None,
            };
        }
        let r = Resampler::resize(image.height(), image.width(), h, w);
        Self {
            image: r.apply(image),
            resize: Some(r),
        }
    }

    /// Maps a gradient on the fitted image back to the original image.
    pub fn backward(&self, grad: RgbImage) -> RgbImage {
        match &self.resize {
            Some(r) => r.adjoint(&grad),
            None => grad,
        }
    }
}

/// Forward pass plus decoding on an image of any size.
pub fn run_detector(det: &dyn DetectorAdapter, image: &RgbImage) -> Result<DetectionGrid> {
    let fitted = FittedInput::new(det.descriptor(), image);
    let raw = det.forward(&fitted.image)?;
    decode_grid(&raw, det.descriptor())
}
