use serde::{Deserialize, Serialize};

use super::{DetectorDescriptor, RawGridOutput, ScoreMode};
use crate::error::{Error, Result};

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Decoded per-box predictions, indexed like `RawGridOutput`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionGrid {
    pub grid: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    /// `(cx, cy, w, h)` normalised to the input image.
    pub geometry: Vec<[f64; 4]>,
    pub objectness: Vec<f64>,
    /// Row-major `box_count x classes`.
    pub class_probs: Vec<f64>,
}

impl DetectionGrid {
    pub fn box_count(&self) -> usize {
        self.objectness.len()
    }

    pub fn probs(&self, index: usize) -> &[f64] {
        &self.class_probs[index * self.classes..(index + 1) * self.classes]
    }

    /// Class with the highest probability and that probability.
    pub fn best_class(&self, index: usize) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &p) in self.probs(index).iter().enumerate() {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }

    /// `P_obj * max_c P(c)`, the detection score of box `index`.
    pub fn box_score(&self, index: usize) -> f64 {
        self.objectness[index] * self.best_class(index).1
    }

    pub fn person_score(&self, index: usize, person_class: usize, mode: ScoreMode) -> f64 {
        let p = self.probs(index)[person_class];
        match mode {
            ScoreMode::Product => self.objectness[index] * p,
            ScoreMode::ClassOnly => p,
        }
    }
}

/// Logistic objectness, softmax classes and anchor-box geometry:
/// `cx = (col + s(tx)) / S`, `cy = (row + s(ty)) / S`,
/// `w = anchor_w * exp(tw) / S`, `h = anchor_h * exp(th) / S`.
pub fn decode_grid(raw: &RawGridOutput, desc: &DetectorDescriptor) -> Result<DetectionGrid> {
    raw.check_against(desc)?;
    let n = raw.box_count();
    let s = desc.grid as f64;
    let mut geometry = Vec::with_capacity(n);
    let mut objectness = Vec::with_capacity(n);
    let mut class_probs = Vec::with_capacity(n * desc.classes);
    for idx in 0..n {
        let cell = idx / desc.boxes_per_cell;
        let anchor = desc.anchors[idx % desc.boxes_per_cell];
        let (row, col) = (cell / desc.grid, cell % desc.grid);
        let v = raw.box_values(idx);
        let cx = (col as f64 + logistic(v[0])) / s;
        let cy = (row as f64 + logistic(v[1])) / s;
        let w = anchor[0] * v[2].exp() / s;
        let h = anchor[1] * v[3].exp() / s;
        geometry.push([cx, cy, w, h]);
        objectness.push(logistic(v[4]));
        class_probs.extend(softmax(&v[5..]));
    }
    if geometry.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("decoded box geometry".into()));
    }
    Ok(DetectionGrid {
        grid: desc.grid,
        boxes_per_cell: desc.boxes_per_cell,
        classes: desc.classes,
        geometry,
        objectness,
        class_probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxScore {
    pub index: usize,
    pub value: f64,
}

/// Highest person score and the box that attains it (first index on ties).
pub fn person_score_argmax(
    grid: &DetectionGrid,
    person_class: usize,
    mode: ScoreMode,
) -> Result<BoxScore> {
    if person_class >= grid.classes {
        return Err(Error::Detector(format!(
            "person class {person_class} out of range for {} classes",
            grid.classes
        )));
    }
    if grid.box_count() == 0 {
        return Err(Error::Detector("grid has no boxes".into()));
    }
    let mut best = BoxScore {
        index: 0,
        value: f64::NEG_INFINITY,
    };
    for idx in 0..grid.box_count() {
        let v = grid.person_score(idx, person_class, mode);
        if v > best.value {
            best = BoxScore {
                index: idx,
                value: v,
            };
        }
    }
    Ok(best)
}

pub fn extract_person_score(
    grid: &DetectionGrid,
    person_class: usize,
    mode: ScoreMode,
) -> Result<f64> {
    person_score_argmax(grid, person_class, mode).map(|b| b.value)
}

/// Upstream gradients on the decoded probabilities of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGrad {
    pub objectness: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl GridGrad {
    pub fn zeros(grid: &DetectionGrid) -> Self {
        Self {
            objectness: vec![0.0; grid.objectness.len()],
            class_probs: vec![0.0; grid.class_probs.len()],
        }
    }

    /// Accumulates `weight * d(person score of box)/d(probs)`.
    pub fn add_person_score(
        &mut self,
        grid: &DetectionGrid,
        index: usize,
        person_class: usize,
        mode: ScoreMode,
        weight: f64,
    ) {
        let c = grid.classes;
        match mode {
            ScoreMode::Product => {
                self.objectness[index] += weight * grid.probs(index)[person_class];
                self.class_probs[index * c + person_class] += weight * grid.objectness[index];
            }
            ScoreMode::ClassOnly => {
                self.class_probs[index * c + person_class] += weight;
            }
        }
    }

    /// Accumulates `weight * d(P_obj * max_c P(c))/d(probs)`.
    pub fn add_box_score(&mut self, grid: &DetectionGrid, index: usize, weight: f64) {
        let (cls, p) = grid.best_class(index);
        self.objectness[index] += weight * p;
        self.class_probs[index * grid.classes + cls] += weight * grid.objectness[index];
    }
}

/// Pulls probability-space gradients back through the logistic and softmax
/// to the raw logits. Geometry receives no gradient.
pub fn decode_backward(grid: &DetectionGrid, grad: &GridGrad) -> RawGridOutput {
    let c = grid.classes;
    let stride = 5 + c;
    let n = grid.box_count();
    let mut data = vec![0.0; n * stride];
    for idx in 0..n {
        let out = &mut data[idx * stride..(idx + 1) * stride];
        let po = grid.objectness[idx];
        out[4] = grad.objectness[idx] * po * (1.0 - po);
        let p = grid.probs(idx);
        let g = &grad.class_probs[idx * c..(idx + 1) * c];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out[5 + j] = p[j] * (g[j] - dot);
        }
    }
    RawGridOutput {
        grid: grid.grid,
        boxes_per_cell: grid.boxes_per_cell,
        classes: c,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(s: usize, b: usize, c: usize) -> DetectorDescriptor {
        DetectorDescriptor {
            grid: s,
            boxes_per_cell: b,
            classes: c,
            input_size: (416, 416),
            person_class: 0,
            anchors: (0..b).map(|i| [1.0 + i as f64, 1.5 + i as f64]).collect(),
            class_names: vec![],
        }
    }

    fn random_raw(d: &DetectorDescriptor, seed: u64) -> RawGridOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = RawGridOutput::zeros(d);
        raw.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-4.0..4.0));
        raw
    }

    #[test]
    fn logistic_of_zero_is_half() {
        let d = desc(1, 1, 3);
        let raw = RawGridOutput::zeros(&d);
        let g = decode_grid(&raw, &d).unwrap();
        assert_eq!(g.objectness[0], 0.5);
        for p in g.probs(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(g.geometry[0], [0.5, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn class_rows_sum_to_one_vs_naive_softmax() {
        let d = desc(13, 5, 80);
        let raw = random_raw(&d, 3);
        let g = decode_grid(&raw, &d).unwrap();
        for idx in 0..g.box_count() {
            let logits = &raw.box_values(idx)[5..];
            // naive softmax without the max shift
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let sum: f64 = g.probs(idx).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            for (p, l) in g.probs(idx).iter().zip(logits) {
                assert!((p - l.exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_and_non_finite() {
        let d = desc(2, 1, 3);
        let mut raw = RawGridOutput::zeros(&d);
        raw.data.pop();
        assert!(matches!(decode_grid(&raw, &d), Err(Error::Shape { .. })));
        let mut raw = RawGridOutput::zeros(&d);
        raw.data[3] = f64::NAN;
        assert!(matches!(decode_grid(&raw, &d), Err(Error::NonFinite(_))));
    }

    fn grid_with_scores(pairs: &[(f64, f64)]) -> DetectionGrid {
        DetectionGrid {
            grid: 1,
            boxes_per_cell: pairs.len(),
            classes: 2,
            geometry: vec![[0.5, 0.5, 0.1, 0.1]; pairs.len()],
            objectness: pairs.iter().map(|p| p.0).collect(),
            class_probs: pairs.iter().flat_map(|p| [p.1, 1.0 - p.1]).collect(),
        }
    }

    #[test]
    fn person_score_is_max_of_products() {
        let g = grid_with_scores(&[(1.0, 0.1), (1.0, 0.9), (1.0, 0.3)]);
        assert_eq!(
            extract_person_score(&g, 0, ScoreMode::Product).unwrap(),
            0.9
        );
        let g = grid_with_scores(&[(0.8, 0.5)]);
        assert!((extract_person_score(&g, 0, ScoreMode::Product).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(
            extract_person_score(&g, 0, ScoreMode::ClassOnly).unwrap(),
            0.5
        );
        assert!(extract_person_score(&g, 2, ScoreMode::Product).is_err());
    }

    #[test]
    fn score_matches_triple_loop() {
        let d = desc(13, 5, 80);
        for seed in 0..5 {
            let g = decode_grid(&random_raw(&d, seed), &d).unwrap();
            let mut best = f64::NEG_INFINITY;
            for row in 0..13 {
                for col in 0..13 {
                    for b in 0..5 {
                        let i = (row * 13 + col) * 5 + b;
                        best = best.max(g.objectness[i] * g.class_probs[i * 80]);
                    }
                }
            }
            assert_eq!(
                extract_person_score(&g, 0, ScoreMode::Product).unwrap(),
                best
            );
        }
    }

    #[test]
    fn shift_invariance_of_class_logits() {
        let d = desc(4, 2, 5);
        let raw = random_raw(&d, 11);
        let mut shifted = raw.clone();
        for idx in 0..shifted.box_count() {
            shifted.box_values_mut(idx)[5..]
                .iter_mut()
                .for_each(|v| *v += 3.7);
        }
        let a =
            extract_person_score(&decode_grid(&raw, &d).unwrap(), 0, ScoreMode::Product).unwrap();
        let b = extract_person_score(&decode_grid(&shifted, &d).unwrap(), 0, ScoreMode::Product)
            .unwrap();
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn decode_backward_matches_finite_differences() {
        let d = desc(2, 2, 4);
        let raw = random_raw(&d, 5);
        let f = |r: &RawGridOutput| {
            let g = decode_grid(r, &d).unwrap();
            let best = person_score_argmax(&g, 1, ScoreMode::Product).unwrap();
            best.value + 0.5 * g.box_score(3)
        };
        let g = decode_grid(&raw, &d).unwrap();
        let best = person_score_argmax(&g, 1, ScoreMode::Product).unwrap();
        let mut gg = GridGrad::zeros(&g);
        gg.add_person_score(&g, best.index, 1, ScoreMode::Product, 1.0);
        gg.add_box_score(&g, 3, 0.5);
        let analytic = decode_backward(&g, &gg);
        let h = 1e-6;
        for i in 0..raw.data.len() {
            let mut p = raw.clone();
            p.data[i] += h;
            let mut m = raw.clone();
            m.data[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - analytic.data[i]).abs() < 1e-7,
                "component {i}: fd {fd} vs {}",
                analytic.data[i]
            );
        }
    }
}
