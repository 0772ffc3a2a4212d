//! Supervised training of the toy detector on procedural scenes.
//!
//! Loss per image: logistic cross-entropy on objectness for every box slot,
//! softmax cross-entropy on classes and squared error on `(s(tx), s(ty), tw,
//! th)` for the slot responsible for each object (the cell holding its
//! centre, anchor closest in aspect).

use rand::Rng;
use rayon::prelude::*;

use super::toy::{FeatureMap, ToyDetector};
use super::{logistic, softmax, DetectorAdapter, DetectorDescriptor, RawGridOutput};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeedableRng;
use crate::scene::{PersonBox, Scene};
use crate::synthetic::{background_scene, synthetic_scene};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Chance that a person gets a random rectangle pasted over the torso
    /// (label unchanged).
    pub occluder_prob: f64,
    /// Chance that a training image is background only.
    pub empty_prob: f64,
    pub coord_weight: f64,
    pub noobj_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            scenes_per_epoch: 1024,
            batch_size: 32,
            step_size: 3e-3,
            seed: 2024,
            occluder_prob: 0.0,
            empty_prob: 0.1,
            coord_weight: 2.0,
            noobj_weight: 0.5,
        }
    }
}

fn responsible_slot(desc: &DetectorDescriptor, b: &PersonBox) -> (usize, usize, usize) {
    let s = desc.grid as f64;
    let col = ((b.cx * s) as usize).min(desc.grid - 1);
    let row = ((b.cy * s) as usize).min(desc.grid - 1);
    let aspect = b.h / b.w;
    let anchor = (0..desc.boxes_per_cell)
        .min_by(|&i, &j| {
            let di = (desc.anchors[i][1] / desc.anchors[i][0] / aspect)
                .ln()
                .abs();
            let dj = (desc.anchors[j][1] / desc.anchors[j][0] / aspect)
                .ln()
                .abs();
            di.total_cmp(&dj)
        })
        .unwrap_or(0);
    (row, col, anchor)
}

/// Supervised loss of one raw output against labelled boxes, with its
/// gradient w.r.t. the raw values.
pub fn supervised_loss(
    desc: &DetectorDescriptor,
    raw: &RawGridOutput,
    boxes: &[PersonBox],
    cfg: &PretrainConfig,
) -> (f64, RawGridOutput) {
    let s = desc.grid as f64;
    let mut grad = RawGridOutput::zeros(desc);
    let mut targets: Vec<Option<&PersonBox>> = vec![None; raw.box_count()];
    for b in boxes {
        let (row, col, a) = responsible_slot(desc, b);
        targets[(row * desc.grid + col) * desc.boxes_per_cell + a] = Some(b);
    }
    let mut loss = 0.0;
    for (idx, target) in targets.iter().enumerate() {
        let v = raw.box_values(idx);
        let g = grad.box_values_mut(idx);
        let p = logistic(v[4]);
        match target {
            None => {
                loss -= cfg.noobj_weight * (1.0 - p).max(1e-12).ln();
                g[4] = cfg.noobj_weight * p;
            }
            Some(b) => {
                loss -= p.max(1e-12).ln();
                g[4] = p - 1.0;
                let probs = softmax(&v[5..]);
                let label = b.label as usize;
                loss -= probs[label].max(1e-12).ln();
                for (k, pk) in probs.iter().enumerate() {
                    g[5 + k] = pk - if k == label { 1.0 } else { 0.0 };
                }
                let cell = idx / desc.boxes_per_cell;
                let (row, col) = ((cell / desc.grid) as f64, (cell % desc.grid) as f64);
                let anchor = desc.anchors[idx % desc.boxes_per_cell];
                let tx = b.cx * s - col;
                let ty = b.cy * s - row;
                for (k, t) in [(0, tx), (1, ty)] {
                    let sg = logistic(v[k]);
                    loss += cfg.coord_weight * (sg - t).powi(2);
                    g[k] = cfg.coord_weight * 2.0 * (sg - t) * sg * (1.0 - sg);
                }
                let tw = (b.w * s / anchor[0]).ln();
                let th = (b.h * s / anchor[1]).ln();
                for (k, t) in [(2, tw), (3, th)] {
                    loss += cfg.coord_weight * (v[k] - t).powi(2);
                    g[k] = cfg.coord_weight * 2.0 * (v[k] - t);
                }
            }
        }
    }
    (loss, grad)
}

/// Pastes a random rectangle over the torso of each person box with
/// probability `prob`: either uniform noise or a flat random colour.
pub fn add_occluders(scene: &mut Scene, prob: f64, rng: &mut impl Rng) {
    let (h, w) = (scene.image.height() as f64, scene.image.width() as f64);
    let persons: Vec<PersonBox> = scene.person_boxes().copied().collect();
    for b in persons {
        if !rng.gen_bool(prob) {
            continue;
        }
        let rw = (rng.gen_range(0.4..0.75) * b.w * w).round().max(1.0);
        let rh = (rw * rng.gen_range(1.1..1.7)).round();
        let cx = b.cx * w;
        let cy = (b.cy - b.h / 2.0 + rng.gen_range(0.35..0.55) * b.h) * h;
        let x0 = (cx - rw / 2.0).round().max(0.0) as usize;
        let y0 = (cy - rh / 2.0).round().max(0.0) as usize;
        let x1 = ((x0 as f64 + rw) as usize).min(scene.image.width());
        let y1 = ((y0 as f64 + rh) as usize).min(scene.image.height());
        let noise = rng.gen_bool(0.6);
        let flat: [f64; 3] = std::array::from_fn(|_| rng.gen());
        for y in y0..y1 {
            for x in x0..x1 {
                let px = if noise {
                    std::array::from_fn(|_| rng.gen())
                } else {
                    flat
                };
                scene.image.set(y, x, px);
            }
        }
    }
}

fn training_scene(cfg: &PretrainConfig, epoch: usize, i: usize) -> Scene {
    let rng = SeedableRng::new(cfg.seed).derive_path(&[epoch as u64, i as u64]);
    let mut r = rng.derive(1).stream();
    let id = format!("pre_{epoch}_{i}");
    if r.gen_bool(cfg.empty_prob) {
        return background_scene(&id, &rng);
    }
    let mut scene = synthetic_scene(&id, &rng);
    add_occluders(&mut scene, cfg.occluder_prob, &mut r);
    scene
}

fn image_grad(
    det: &ToyDetector,
    image: &RgbImage,
    boxes: &[PersonBox],
    cfg: &PretrainConfig,
) -> (f64, Vec<f64>) {
    let net = det.net();
    let trace = net.forward_trace(FeatureMap::from_rgb(image));
    let raw = det.map_to_raw(&trace.output);
    let (loss, g) = supervised_loss(det.descriptor(), &raw, boxes, cfg);
    let mut pg = vec![0.0; net.param_len()];
    net.backward(&trace, &det.raw_to_map(&g), Some(&mut pg));
    (loss, pg)
}

/// Trains `det` in place of a copy and returns it with the per-epoch mean
/// loss. Gradients are summed in scene order, so the result does not
/// depend on the thread count.
pub fn pretrain(det: &ToyDetector, cfg: &PretrainConfig) -> Result<(ToyDetector, Vec<f64>)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.scenes_per_epoch == 0 {
        return Err(Error::Config(
            "pretraining needs epochs, batch size and scenes > 0".into(),
        ));
    }
    let mut params = det.net().params();
    let mut adam = Adam::new(
        AdamConfig {
            step_size: cfg.step_size,
            ..AdamConfig::default()
        },
        params.len(),
    );
    let mut current = det.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= cfg.epochs * 3 / 4 {
            cfg.step_size * 0.3
        } else {
            cfg.step_size
        };
        let mut epoch_loss = 0.0;
        for start in (0..cfg.scenes_per_epoch).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(cfg.scenes_per_epoch);
            let results: Vec<(f64, Vec<f64>)> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let scene = training_scene(cfg, epoch, i);
                    image_grad(&current, &scene.image, &scene.boxes, cfg)
                })
                .collect();
            let n = (end - start) as f64;
            let mut grad = vec![0.0; params.len()];
            for (l, g) in &results {
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / n;
                }
            }
            adam.step(&mut params, &grad, lr);
            let mut net = current.net().clone();
            net.set_params(&params);
            current = current.with_net(net);
        }
        let mean = epoch_loss / cfg.scenes_per_epoch as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                reason: "non-finite pretraining loss".into(),
            });
        }
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok((current, history))
}
