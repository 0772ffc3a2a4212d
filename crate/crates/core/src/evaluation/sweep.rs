//! Exploration sweeps: one trained patch per initialisation, ranked by
//! digital attack success.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{digital_eval, EvalConfig};
use crate::detector::{detect, run_detector, DetectorAdapter};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::palette::Palette;
use crate::patch::{new_patch, InitSpec, Patch};
use crate::rng::SeedableRng;
use crate::scene::{PersonBox, SceneSet};
use crate::trainer::{train, TrainConfig, TrainOptions};
use crate::transforms::{sample_transform_params, SceneComposite};

const CANVAS_GRAY: [f64; 3] = [0.5, 0.5, 0.5];
const HISTOGRAM_TAG: u64 = 0x4849_5354;
pub const NO_DETECTION: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub init: InitSpec,
    /// Colour family of the initial image.
    pub color_tag: String,
    /// Shape family of the initial image.
    pub shape_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub entries: Vec<SweepEntry>,
    /// `(height, width)` of every trained patch.
    pub patch_size: (usize, usize),
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("sweep needs at least one entry".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate sweep entry name {:?}",
                    e.name
                )));
            }
        }
        self.train.validate()?;
        self.eval.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub color_tag: String,
    pub shape_tag: String,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Class of the strongest detection inside the patch region on
    /// patch-only canvases, or `none`.
    pub class_histogram: BTreeMap<String, usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Sorted by mean R_s descending, then name; failed entries last.
    pub rows: Vec<SweepRow>,
}

/// Detected-as histogram of `patch` pasted alone on grey canvases, one
/// canvas per repetition.
pub fn patch_class_histogram(
    patch: &Patch,
    det: &dyn DetectorAdapter,
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, usize>> {
    let desc = det.descriptor();
    let (h, w) = desc.input_size;
    let canvas = RgbImage::filled(h, w, CANVAS_GRAY);
    let holder = [PersonBox::person(0.5, 0.5, 0.6, 0.9).map_err(Error::Placement)?];
    let root = SeedableRng::new(cfg.seed).derive(HISTOGRAM_TAG);
    let mut hist = BTreeMap::new();
    for r in 0..cfg.repetitions {
        let params = sample_transform_params(&cfg.eot, &mut root.derive(r as u64).stream());
        let comp = SceneComposite::build("canvas", &canvas, &holder, patch, &[(0, params)]);
        let regions = comp.regions();
        let grid = run_detector(det, &comp.image)?;
        let best = detect(&grid, cfg.score_threshold, cfg.nms_iou)?
            .into_iter()
            .filter(|d| {
                regions
                    .iter()
                    .any(|g| d.cx >= g[0] && d.cx <= g[2] && d.cy >= g[1] && d.cy <= g[3])
            })
            .max_by(|a, b| a.score.total_cmp(&b.score));
        let label = best.map_or_else(
            || NO_DETECTION.to_string(),
            |d| desc.class_name(d.class_index),
        );
        *hist.entry(label).or_insert(0) += 1;
    }
    Ok(hist)
}

fn run_entry(
    entry: &SweepEntry,
    spec: &SweepSpec,
    train_set: &SceneSet,
    test_set: &SceneSet,
    det: &dyn DetectorAdapter,
    palette: &Palette,
) -> Result<(f64, f64, f64, BTreeMap<String, usize>)> {
    let init = new_patch(spec.patch_size.0, spec.patch_size.1, &entry.init)?;
    let (patch, _) = train(
        &init,
        train_set,
        det,
        palette,
        &spec.train,
        &TrainOptions::default(),
    )?;
    let report = digital_eval(Some(&patch), test_set, det, &spec.eval)?;
    let hist = patch_class_histogram(&patch, det, &spec.eval)?;
    Ok((report.mean, report.min, report.max, hist))
}

/// Trains and evaluates every entry. A failing entry is logged and kept
/// as a row carrying its error.
pub fn sweep(
    spec: &SweepSpec,
    train_set: &SceneSet,
    test_set: &SceneSet,
    det: &dyn DetectorAdapter,
    palette: &Palette,
) -> Result<SweepReport> {
    spec.validate()?;
    let mut rows: Vec<SweepRow> = spec
        .entries
        .iter()
        .map(|e| {
            let mut row = SweepRow {
                name: e.name.clone(),
                color_tag: e.color_tag.clone(),
                shape_tag: e.shape_tag.clone(),
                mean: None,
                min: None,
                max: None,
                class_histogram: BTreeMap::new(),
                error: None,
            };
            match run_entry(e, spec, train_set, test_set, det, palette) {
                Ok((mean, min, max, hist)) => {
                    row.mean = Some(mean);
                    row.min = Some(min);
                    row.max = Some(max);
                    row.class_histogram = hist;
                }
                Err(err) => {
                    log::warn!("sweep entry {}: {err}", e.name);
                    row.error = Some(err.to_string());
                }
            }
            row
        })
        .collect();
    rows.sort_by(|a, b| match (a.mean, b.mean) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.name.cmp(&b.name)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.name.cmp(&b.name),
    });
    Ok(SweepReport { rows })
}
