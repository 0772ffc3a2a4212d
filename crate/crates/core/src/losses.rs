//! The patch objective: detection loss, smoothness (TV) and printability
//! (NPS) penalties, the disappearance term and their weighted sum.
//!
//! Each term comes in a value form and a value-plus-gradient form.

use serde::{Deserialize, Serialize};

use crate::detector::{person_score_argmax, DetectionGrid, GridGrad, ScoreMode};
use crate::error::{Error, Result};
use crate::palette::Palette;
use crate::patch::Patch;

/// Smoothing constant inside the TV square root.
pub const TV_EPS: f64 = 1e-8;

const REGION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_tv: f64,
    pub lambda_nps: f64,
    pub mu_disappear: f64,
}

/// Defaults put each penalty near a tenth of the detection loss for a
/// random 300x200 patch against the bundled toy detector.
impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_tv: 8.5e-7,
            lambda_nps: 6e-6,
            mu_disappear: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_tv", self.lambda_tv),
            ("lambda_nps", self.lambda_nps),
            ("mu_disappear", self.mu_disappear),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub detection: f64,
    pub tv: f64,
    pub nps: f64,
    pub disappear: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(detection: f64, tv: f64, nps: f64, disappear: f64, w: &LossWeights) -> Self {
        Self {
            detection,
            tv,
            nps,
            disappear,
            total: detection + w.lambda_tv * tv + w.lambda_nps * nps + w.mu_disappear * disappear,
        }
    }
}

/// TV of an `h x w x c` interleaved plane. Missing neighbours contribute a
/// zero difference; each term is `sqrt(d² + eps) - sqrt(eps)` so a constant
/// plane scores exactly zero.
pub fn tv_plane(data: &[f64], h: usize, w: usize, c: usize) -> f64 {
    tv_plane_impl(data, h, w, c, None)
}

fn tv_plane_impl(data: &[f64], h: usize, w: usize, c: usize, mut grad: Option<&mut [f64]>) -> f64 {
    let base = TV_EPS.sqrt();
    let at = |y: usize, x: usize, k: usize| (y * w + x) * c + k;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let v = data[at(y, x, k)];
                let dv = if y + 1 < h {
                    v - data[at(y + 1, x, k)]
                } else {
                    0.0
                };
                let dh = if x + 1 < w {
                    v - data[at(y, x + 1, k)]
                } else {
                    0.0
                };
                let r = (dv * dv + dh * dh + TV_EPS).sqrt();
                total += r - base;
                if let Some(g) = grad.as_deref_mut() {
                    g[at(y, x, k)] += (dv + dh) / r;
                    if y + 1 < h {
                        g[at(y + 1, x, k)] -= dv / r;
                    }
                    if x + 1 < w {
                        g[at(y, x + 1, k)] -= dh / r;
                    }
                }
            }
        }
    }
    total
}

pub fn tv_loss(patch: &Patch) -> f64 {
    tv_plane(patch.data(), patch.height(), patch.width(), 3)
}

pub fn tv_loss_grad(patch: &Patch) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; patch.data().len()];
    let v = tv_plane_impl(patch.data(), patch.height(), patch.width(), 3, Some(&mut g));
    (v, g)
}

fn nearest(px: &[f64], palette: &Palette) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in palette.colors().iter().enumerate() {
        let d2 = (px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2);
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Sum over pixels of the Euclidean distance to the nearest palette colour.
pub fn nps_loss(patch: &Patch, palette: &Palette) -> Result<f64> {
    Ok(nps_loss_grad(patch, palette)?.0)
}

/// Gradient uses the first nearest colour in palette order on ties and is
/// zero on exact matches.
pub fn nps_loss_grad(patch: &Patch, palette: &Palette) -> Result<(f64, Vec<f64>)> {
    if palette.is_empty() {
        return Err(Error::Palette("palette is empty".into()));
    }
    let mut total = 0.0;
    let mut g = vec![0.0; patch.data().len()];
    for (px, gp) in patch.data().chunks_exact(3).zip(g.chunks_exact_mut(3)) {
        let (i, d) = nearest(px, palette);
        total += d;
        if d > 0.0 {
            let c = palette.colors()[i];
            for k in 0..3 {
                gp[k] = (px[k] - c[k]) / d;
            }
        }
    }
    Ok((total, g))
}

/// Mean over the batch of each grid's best person score.
pub fn detection_loss(
    grids: &[DetectionGrid],
    person_class: usize,
    mode: ScoreMode,
) -> Result<f64> {
    Ok(detection_loss_grad(grids, person_class, mode)?.0)
}

pub fn detection_loss_grad(
    grids: &[DetectionGrid],
    person_class: usize,
    mode: ScoreMode,
) -> Result<(f64, Vec<GridGrad>)> {
    if grids.is_empty() {
        return Err(Error::Loss("detection loss over an empty batch".into()));
    }
    let n = grids.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(grids.len());
    for g in grids {
        let best = person_score_argmax(g, person_class, mode)?;
        total += best.value;
        let mut gg = GridGrad::zeros(g);
        gg.add_person_score(g, best.index, person_class, mode, 1.0 / n);
        grads.push(gg);
    }
    Ok((total / n, grads))
}

fn check_region(r: &[f64; 4]) -> Result<()> {
    let [x0, y0, x1, y1] = *r;
    let inside = |v: f64| (-REGION_TOL..=1.0 + REGION_TOL).contains(&v);
    if !(inside(x0) && inside(y0) && inside(x1) && inside(y1)) || x0 > x1 || y0 > y1 {
        return Err(Error::Loss(format!(
            "patch region {r:?} is not inside the image"
        )));
    }
    Ok(())
}

fn in_region(cx: f64, cy: f64, regions: &[[f64; 4]]) -> bool {
    regions
        .iter()
        .any(|r| cx >= r[0] && cx <= r[2] && cy >= r[1] && cy <= r[3])
}

/// Mean over grids of the highest any-class score `P_obj * max_c P(c)`
/// among boxes whose centre lies inside one of that grid's patch regions.
/// A grid with no such box contributes 0.
pub fn disappearance_loss(grids: &[DetectionGrid], regions: &[Vec<[f64; 4]>]) -> Result<f64> {
    Ok(disappearance_loss_grad(grids, regions)?.0)
}

pub fn disappearance_loss_grad(
    grids: &[DetectionGrid],
    regions: &[Vec<[f64; 4]>],
) -> Result<(f64, Vec<GridGrad>)> {
    if grids.is_empty() {
        return Err(Error::Loss("disappearance loss over an empty batch".into()));
    }
    if grids.len() != regions.len() {
        return Err(Error::Loss(format!(
            "{} grids but {} region lists",
            grids.len(),
            regions.len()
        )));
    }
    let n = grids.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(grids.len());
    for (g, regs) in grids.iter().zip(regions) {
        regs.iter().try_for_each(check_region)?;
        let mut gg = GridGrad::zeros(g);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..g.box_count() {
            let [cx, cy, _, _] = g.geometry[i];
            if !in_region(cx, cy, regs) {
                continue;
            }
            let s = g.box_score(i);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if let Some((i, s)) = best {
            total += s;
            gg.add_box_score(g, i, 1.0 / n);
        }
        grads.push(gg);
    }
    Ok((total / n, grads))
}

/// Evaluates every term; the disappearance term is skipped (reported as 0)
/// when its weight is 0.
pub fn total_objective(
    patch: &Patch,
    grids: &[DetectionGrid],
    regions: &[Vec<[f64; 4]>],
    palette: &Palette,
    weights: &LossWeights,
    person_class: usize,
    mode: ScoreMode,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let detection = detection_loss(grids, person_class, mode)?;
    let tv = tv_loss(patch);
    let nps = nps_loss(patch, palette)?;
    let disappear = if weights.mu_disappear > 0.0 {
        disappearance_loss(grids, regions)?
    } else {
        0.0
    };
    Ok(LossBreakdown::combine(
        detection, tv, nps, disappear, weights,
    ))
}
