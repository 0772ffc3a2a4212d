use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::DetectionGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_index: usize,
}

impl Detection {
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Total order used for NMS: score descending, then geometry and class.
    fn rank(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.cx.total_cmp(&other.cx))
            .then(self.cy.total_cmp(&other.cy))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
            .then(self.class_index.cmp(&other.class_index))
    }
}

/// Intersection over union of two `(x0, y0, x1, y1)` rectangles.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn check_params(score_threshold: f64, nms_iou: f64) -> Result<()> {
    if !(score_threshold > 0.0 && score_threshold < 1.0) {
        return Err(Error::Config(format!(
            "score threshold must lie in (0, 1), got {score_threshold}"
        )));
    }
    if !(nms_iou > 0.0 && nms_iou < 1.0) {
        return Err(Error::Config(format!(
            "NMS IoU must lie in (0, 1), got {nms_iou}"
        )));
    }
    Ok(())
}

/// Greedy per-class suppression; the result does not depend on the order
/// of `candidates`.
pub fn nms(mut candidates: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    candidates.sort_by(Detection::rank);
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        let suppressed = kept.iter().any(|k| {
            k.class_index == cand.class_index && iou(k.corners(), cand.corners()) >= nms_iou
        });
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// All classes: threshold on `P_obj * max class prob`, then NMS.
pub fn detect(grid: &DetectionGrid, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    check_params(score_threshold, nms_iou)?;
    let candidates = (0..grid.box_count())
        .filter_map(|i| {
            let (class_index, p) = grid.best_class(i);
            let score = grid.objectness[i] * p;
            (score >= score_threshold).then(|| {
                let [cx, cy, w, h] = grid.geometry[i];
                Detection {
                    cx,
                    cy,
                    w,
                    h,
                    score,
                    class_index,
                }
            })
        })
        .collect();
    Ok(nms(candidates, nms_iou))
}

pub fn detect_persons(
    grid: &DetectionGrid,
    person_class: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    Ok(detect(grid, score_threshold, nms_iou)?
        .into_iter()
        .filter(|d| d.class_index == person_class)
        .collect())
}
