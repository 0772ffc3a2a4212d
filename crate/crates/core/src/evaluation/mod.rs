//! Attack success rate, the repeated digital protocol, photo-batch
//! evaluation, initialisation sweeps and report files.

mod photo;
mod plot;
mod report;
mod sweep;

pub use photo::{photo_eval, ConditionKey, ConditionResult, PhotoReport, META_JSON};
pub use plot::{render_line_plot, Curve};
pub use report::{emit_report, Report, ReportRow, CSV_HEADER};
pub use sweep::{patch_class_histogram, sweep, SweepEntry, SweepReport, SweepRow, SweepSpec};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detect_persons, iou, run_detector, Detection, DetectorAdapter};
use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::rng::SeedableRng;
use crate::scene::{Scene, SceneSet};
use crate::transforms::{
    sample_transform_params, EotConfig, SceneComposite, TransformParams, Variant,
};

const REPETITION_TAG: u64 = 0x5245_5045;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// IoU needed for a post-attack detection to count as the same person.
    pub match_iou: f64,
    pub repetitions: usize,
    pub seed: u64,
    /// Placement and transform ranges used when pasting test patches.
    pub eot: EotConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_iou: 0.4,
            match_iou: 0.5,
            repetitions: 10,
            seed: 0,
            eot: EotConfig::variant(Variant::Conventional),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "score_threshold must lie in [0, 1], got {}",
                self.score_threshold
            )));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return Err(Error::Config(format!(
                "match_iou must lie in (0, 1], got {}",
                self.match_iou
            )));
        }
        self.eot.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub detections: Vec<Detection>,
    /// One flag per evaluated person: still detected after the attack.
    pub matches: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub n_all: usize,
    pub n_undetected: usize,
    pub scenes: Vec<SceneRecord>,
}

impl EvalOutcome {
    pub fn new(n_all: usize, n_undetected: usize) -> Result<Self> {
        if n_undetected > n_all {
            return Err(Error::Evaluation(format!(
                "{n_undetected} undetected out of {n_all} persons"
            )));
        }
        Ok(Self {
            n_all,
            n_undetected,
            scenes: Vec::new(),
        })
    }
}

/// `100 * n_undetected / n_all`.
pub fn attack_success_rate(outcome: &EvalOutcome) -> Result<f64> {
    if outcome.n_all == 0 {
        return Err(Error::Evaluation(
            "attack success rate needs at least one person".into(),
        ));
    }
    if outcome.n_undetected > outcome.n_all {
        return Err(Error::Evaluation(
            "more undetected persons than persons".into(),
        ));
    }
    Ok(100.0 * outcome.n_undetected as f64 / outcome.n_all as f64)
}

/// A ground-truth person the detector finds on the clean scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePerson {
    pub box_index: usize,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalReport {
    /// Persons detected without a patch; the `n_all` of every repetition.
    pub n_all: usize,
    pub n_ground_truth: usize,
    pub repetitions: Vec<EvalOutcome>,
    pub rs_percent: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl DigitalReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.repetitions
            .iter()
            .zip(&self.rs_percent)
            .enumerate()
            .map(|(i, (o, rs))| ReportRow {
                condition: format!("rep{:02}", i + 1),
                n_all: o.n_all,
                n_undetected: o.n_undetected,
                rs_percent: *rs,
            })
            .collect()
    }
}

/// Greedy one-to-one matching of ground-truth persons to clean-scene
/// person detections by descending IoU.
pub fn baseline_persons(
    scene: &Scene,
    detections: &[Detection],
    match_iou: f64,
) -> Vec<BaselinePerson> {
    let mut pairs = Vec::new();
    for (bi, b) in scene
        .boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_person())
    {
        for (di, d) in detections.iter().enumerate() {
            let v = iou(b.corners(), d.corners());
            if v >= match_iou {
                pairs.push((v, bi, di));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_b = vec![false; scene.boxes.len()];
    let mut used_d = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, bi, di) in pairs {
        if !used_b[bi] && !used_d[di] {
            used_b[bi] = true;
            used_d[di] = true;
            out.push(BaselinePerson {
                box_index: bi,
                detection: detections[di],
            });
        }
    }
    out.sort_by_key(|p| p.box_index);
    out
}

fn persons_in(
    det: &dyn DetectorAdapter,
    image: &crate::image::RgbImage,
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    let grid = run_detector(det, image)?;
    detect_persons(
        &grid,
        det.descriptor().person_class,
        cfg.score_threshold,
        cfg.nms_iou,
    )
}

fn attack_scene(
    scene: &Scene,
    baseline: &[BaselinePerson],
    patch: Option<&Patch>,
    det: &dyn DetectorAdapter,
    cfg: &EvalConfig,
    rng: &SeedableRng,
) -> Result<SceneRecord> {
    let image = match patch {
        Some(p) => {
            let mut stream = rng.stream();
            let draws: Vec<(usize, TransformParams)> = baseline
                .iter()
                .map(|b| (b.box_index, sample_transform_params(&cfg.eot, &mut stream)))
                .collect();
            SceneComposite::build(&scene.id, &scene.image, &scene.boxes, p, &draws).image
        }
        None => scene.image.clone(),
    };
    let detections = persons_in(det, &image, cfg)?;
    let matches = baseline
        .iter()
        .map(|b| {
            detections
                .iter()
                .any(|d| iou(d.corners(), b.detection.corners()) >= cfg.match_iou)
        })
        .collect();
    Ok(SceneRecord {
        scene_id: scene.id.clone(),
        detections,
        matches,
    })
}

/// The repeated digital protocol. `patch = None` pastes nothing.
pub fn digital_eval(
    patch: Option<&Patch>,
    test_set: &SceneSet,
    det: &dyn DetectorAdapter,
    cfg: &EvalConfig,
) -> Result<DigitalReport> {
    cfg.validate()?;
    if test_set.is_empty() {
        return Err(Error::Evaluation("test set is empty".into()));
    }
    let baselines: Vec<Vec<BaselinePerson>> = test_set
        .scenes
        .par_iter()
        .map(|s| {
            Ok(baseline_persons(
                s,
                &persons_in(det, &s.image, cfg)?,
                cfg.match_iou,
            ))
        })
        .collect::<Result<_>>()?;
    let n_all: usize = baselines.iter().map(Vec::len).sum();
    if n_all == 0 {
        return Err(Error::Evaluation(
            "the detector finds none of the test persons without a patch".into(),
        ));
    }
    let root = SeedableRng::new(cfg.seed);
    let mut repetitions = Vec::with_capacity(cfg.repetitions);
    let mut rs_percent = Vec::with_capacity(cfg.repetitions);
    for r in 0..cfg.repetitions {
        let rep_rng = root.derive_path(&[REPETITION_TAG, r as u64]);
        let scenes: Vec<SceneRecord> = test_set
            .scenes
            .par_iter()
            .zip(baselines.par_iter())
            .enumerate()
            .map(|(i, (s, b))| attack_scene(s, b, patch, det, cfg, &rep_rng.derive(i as u64)))
            .collect::<Result<_>>()?;
        let still: usize = scenes
            .iter()
            .map(|s| s.matches.iter().filter(|&&m| m).count())
            .sum();
        let outcome = EvalOutcome {
            n_all,
            n_undetected: n_all - still,
            scenes,
        };
        rs_percent.push(attack_success_rate(&outcome)?);
        repetitions.push(outcome);
    }
    let mean = rs_percent.iter().sum::<f64>() / rs_percent.len() as f64;
    let min = rs_percent.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rs_percent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DigitalReport {
        n_all,
        n_ground_truth: test_set.person_count(),
        repetitions,
        rs_percent,
        mean: mean.clamp(min, max),
        min,
        max,
    })
}
