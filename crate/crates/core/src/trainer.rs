//! The Adam loop that optimises a patch against a detector, with
//! checkpointing, interruption and bitwise-exact resume.
//!
//! Every random draw of epoch `e`, batch `b` comes from a stream derived
//! from `(seed, e, b)`, so a resumed run needs only the patch, the Adam
//! moments and the epoch counter to continue exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{
    decode_backward, decode_grid, DetectionGrid, DetectorAdapter, FittedInput, GridGrad, ScoreMode,
};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::losses::{
    detection_loss_grad, disappearance_loss_grad, nps_loss_grad, tv_loss_grad, LossBreakdown,
    LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::palette::Palette;
use crate::patch::Patch;
use crate::rng::{SeedableRng, ALGORITHM_ID};
use crate::scene::{Scene, SceneSet};
use crate::transforms::{composite_scene, EotConfig, SceneComposite};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const BATCH_TAG: u64 = 0x4241_5443;
const STATE_MAGIC: &[u8; 8] = b"CLOAKST1";

pub const PATCH_FILE: &str = "patch.png";
pub const META_FILE: &str = "patch.meta.json";
pub const STATE_FILE: &str = "patch.state.bin";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Step size is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Stop once an epoch-mean total falls below this; 0 disables.
    pub stop_threshold: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub score_mode: ScoreMode,
    pub eot: EotConfig,
    pub weights: LossWeights,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 8,
            adam: AdamConfig::default(),
            lr_decay: 0.5,
            lr_decay_every: 50,
            stop_threshold: 0.0,
            seed: 0,
            shuffle: true,
            score_mode: ScoreMode::Product,
            eot: EotConfig::default(),
            weights: LossWeights::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config(format!(
                "lr_decay must be positive, got {}",
                self.lr_decay
            )));
        }
        if !self.stop_threshold.is_finite() {
            return Err(Error::Config("stop_threshold must be finite".into()));
        }
        self.adam.validate()?;
        self.eot.validate()?;
        self.weights.validate()
    }

    /// Step size for the 0-based `epoch`.
    pub fn step_size_at(&self, epoch: usize) -> f64 {
        let k = if self.lr_decay_every == 0 {
            0
        } else {
            epoch / self.lr_decay_every
        };
        self.adam.step_size * self.lr_decay.powi(k as i32)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seconds: f64,
    /// Seed of the stream all of this epoch's draws derive from.
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// True once the epoch budget is spent or early stopping fired.
    pub finished: bool,
    pub final_patch: Option<PathBuf>,
}

impl TrainHistory {
    /// History without wall-clock times, for exact comparisons.
    pub fn losses(&self) -> Vec<(usize, LossBreakdown)> {
        self.records.iter().map(|r| (r.epoch, r.loss)).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,detection,tv,nps,disappear,total,seconds\n");
        for r in &self.records {
            let l = &r.loss;
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, l.detection, l.tv, l.nps, l.disappear, l.total, r.seconds
            );
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Run-time options that do not affect the optimisation result.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many completed epochs, leaving a resumable
    /// checkpoint.
    pub halt_after: Option<usize>,
}

/// Sidecar written next to every checkpoint PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub objective: f64,
    pub config_hash: String,
    pub corpus_hash: String,
    pub rng_algorithm: String,
    pub aspect_hint: f64,
    pub config: TrainConfig,
    pub palette: Vec<[f64; 3]>,
    pub history: TrainHistory,
}

/// The loss and its patch gradient for a set of scenes.
pub struct Objective<'a> {
    pub detector: &'a dyn DetectorAdapter,
    pub palette: &'a Palette,
    pub weights: LossWeights,
    pub score_mode: ScoreMode,
}

struct Forward {
    fitted: FittedInput,
    grid: DetectionGrid,
}

impl Objective<'_> {
    fn forward(&self, composite: &SceneComposite) -> Result<Forward> {
        let fitted = FittedInput::new(self.detector.descriptor(), &composite.image);
        let raw = self.detector.forward(&fitted.image)?;
        let grid = decode_grid(&raw, self.detector.descriptor())?;
        Ok(Forward { fitted, grid })
    }

    /// Composites `patch` onto `scenes` (global index, scene) with draws
    /// from `rng`, then evaluates the objective and its gradient.
    pub fn evaluate(
        &self,
        patch: &Patch,
        scenes: &[(usize, &Scene)],
        eot: &EotConfig,
        rng: &SeedableRng,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let composites: Vec<SceneComposite> = scenes
            .par_iter()
            .map(|&(i, s)| composite_scene(s, i, patch, eot, rng).0)
            .collect();
        self.evaluate_composites(patch, &composites)
    }

    pub fn evaluate_composites(
        &self,
        patch: &Patch,
        composites: &[SceneComposite],
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let person = self.detector.descriptor().person_class;
        let forwards: Vec<Forward> = composites
            .par_iter()
            .map(|c| self.forward(c))
            .collect::<Result<_>>()?;
        let grids: Vec<DetectionGrid> = forwards.iter().map(|f| f.grid.clone()).collect();
        let (detection, mut grid_grads) = detection_loss_grad(&grids, person, self.score_mode)?;
        let mu = self.weights.mu_disappear;
        let disappear = if mu > 0.0 {
            let regions: Vec<Vec<[f64; 4]>> =
                composites.iter().map(SceneComposite::regions).collect();
            let (d, dg) = disappearance_loss_grad(&grids, &regions)?;
            for (a, b) in grid_grads.iter_mut().zip(&dg) {
                add_scaled(a, b, mu);
            }
            d
        } else {
            0.0
        };
        let (tv, tv_g) = tv_loss_grad(patch);
        let (nps, nps_g) = nps_loss_grad(patch, self.palette)?;
        let breakdown = LossBreakdown::combine(detection, tv, nps, disappear, &self.weights);

        let (ph, pw) = (patch.height(), patch.width());
        let per_scene: Vec<Option<RgbImage>> = composites
            .par_iter()
            .zip(forwards.par_iter())
            .zip(grid_grads.par_iter())
            .map(|((c, f), gg)| -> Result<Option<RgbImage>> {
                if c.parts.is_empty() {
                    return Ok(None);
                }
                let raw_grad = decode_backward(&f.grid, gg);
                let g_img = self.detector.backward(&f.fitted.image, &raw_grad)?;
                Ok(Some(c.backward(&f.fitted.backward(g_img), ph, pw)))
            })
            .collect::<Result<_>>()?;

        let mut grad: Vec<f64> = tv_g
            .iter()
            .zip(&nps_g)
            .map(|(t, n)| self.weights.lambda_tv * t + self.weights.lambda_nps * n)
            .collect();
        for g in per_scene.iter().flatten() {
            for (a, b) in grad.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok((breakdown, grad))
    }
}

fn add_scaled(a: &mut GridGrad, b: &GridGrad, s: f64) {
    for (x, y) in a.objectness.iter_mut().zip(&b.objectness) {
        *x += s * y;
    }
    for (x, y) in a.class_probs.iter_mut().zip(&b.class_probs) {
        *x += s * y;
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over scene ids, pixels and boxes.
pub fn corpus_hash(set: &SceneSet) -> String {
    let mut h = Sha256::new();
    for s in &set.scenes {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        h.update((s.image.height() as u64).to_le_bytes());
        h.update((s.image.width() as u64).to_le_bytes());
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        h.update((s.boxes.len() as u64).to_le_bytes());
        for b in &s.boxes {
            for v in [b.cx, b.cy, b.w, b.h] {
                h.update(v.to_le_bytes());
            }
            h.update(b.label.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// SHA-256 over the serialised config and the palette.
pub fn config_hash(cfg: &TrainConfig, palette: &Palette) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serialises"));
    for c in palette.colors() {
        for v in c {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

struct TrainState {
    patch: Patch,
    adam: Adam,
    epoch: usize,
    history: TrainHistory,
}

/// Optimises `init` against `detector` over `train_set`.
pub fn train(
    init: &Patch,
    train_set: &SceneSet,
    detector: &dyn DetectorAdapter,
    palette: &Palette,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Patch, TrainHistory)> {
    cfg.validate()?;
    let state = TrainState {
        patch: init.clone(),
        adam: Adam::new(cfg.adam, init.data().len()),
        epoch: 0,
        history: TrainHistory::default(),
    };
    run(state, train_set, detector, palette, cfg, opts)
}

/// Continues a run from the checkpoint in `dir`.
pub fn resume(
    dir: impl AsRef<Path>,
    train_set: &SceneSet,
    detector: &dyn DetectorAdapter,
    opts: &TrainOptions,
) -> Result<(Patch, TrainHistory)> {
    let dir = dir.as_ref();
    let (meta, state) = load_checkpoint(dir)?;
    let palette = Palette::new(meta.palette.clone())?;
    if config_hash(&meta.config, &palette) != meta.config_hash {
        return Err(Error::Checkpoint {
            path: dir.join(META_FILE),
            reason: "config hash does not match the stored config".into(),
        });
    }
    let corpus = corpus_hash(train_set);
    if corpus != meta.corpus_hash {
        return Err(Error::Checkpoint {
            path: dir.join(META_FILE),
            reason: format!(
                "corpus hash mismatch: checkpoint {}, given {corpus}",
                meta.corpus_hash
            ),
        });
    }
    if state.history.finished || state.epoch >= meta.config.epochs {
        return Ok((state.patch, state.history));
    }
    let opts = TrainOptions {
        checkpoint_dir: opts
            .checkpoint_dir
            .clone()
            .or_else(|| Some(dir.to_path_buf())),
        ..opts.clone()
    };
    run(state, train_set, detector, &palette, &meta.config, &opts)
}

fn run(
    mut st: TrainState,
    set: &SceneSet,
    detector: &dyn DetectorAdapter,
    palette: &Palette,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Patch, TrainHistory)> {
    if set.is_empty() {
        return Err(Error::EmptyCorpus(PathBuf::from("<train set>")));
    }
    if set.person_count() == 0 {
        return Err(Error::Config("training set has no person boxes".into()));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let objective = Objective {
        detector,
        palette,
        weights: cfg.weights,
        score_mode: cfg.score_mode,
    };
    let root = SeedableRng::new(cfg.seed);
    let n = set.len();
    while st.epoch < cfg.epochs {
        let epoch = st.epoch;
        let started = Instant::now();
        let epoch_rng = root.derive(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            order.shuffle(&mut epoch_rng.derive(SHUFFLE_TAG).stream());
        }
        let lr = cfg.step_size_at(epoch);
        let mut sum = LossBreakdown::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scenes: Vec<(usize, &Scene)> = chunk.iter().map(|&i| (i, &set.scenes[i])).collect();
            let rng = epoch_rng.derive_path(&[BATCH_TAG, b as u64]);
            let (loss, grad) = objective.evaluate(&st.patch, &scenes, &cfg.eot, &rng)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    batch: b,
                    reason: format!("non-finite objective {loss:?}"),
                });
            }
            let k = chunk.len() as f64;
            sum.detection += k * loss.detection;
            sum.tv += k * loss.tv;
            sum.nps += k * loss.nps;
            sum.disappear += k * loss.disappear;
            sum.total += k * loss.total;
            st.patch.update(|px| st.adam.step(px, &grad, lr));
        }
        let nf = n as f64;
        let mean = LossBreakdown {
            detection: sum.detection / nf,
            tv: sum.tv / nf,
            nps: sum.nps / nf,
            disappear: sum.disappear / nf,
            total: sum.total / nf,
        };
        st.epoch += 1;
        st.history.records.push(EpochRecord {
            epoch: st.epoch,
            loss: mean,
            seconds: started.elapsed().as_secs_f64(),
            rng_seed: epoch_rng.seed,
        });
        log::info!(
            "epoch {}/{}: detection {:.4} tv {:.2} nps {:.2} total {:.4}",
            st.epoch,
            cfg.epochs,
            mean.detection,
            mean.tv,
            mean.nps,
            mean.total
        );
        if cfg.stop_threshold > 0.0 && mean.total < cfg.stop_threshold {
            st.history.stopped_early = true;
            break;
        }
        if opts.halt_after == Some(st.epoch) && st.epoch < cfg.epochs {
            let dir = opts.checkpoint_dir.as_ref().ok_or_else(|| {
                Error::Config("halting mid-run needs a checkpoint directory".into())
            })?;
            write_checkpoint(dir, &st, set, palette, cfg)?;
            return Ok((st.patch, st.history));
        }
        if cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0 && st.epoch < cfg.epochs
        {
            if let Some(dir) = &opts.checkpoint_dir {
                write_checkpoint(dir, &st, set, palette, cfg)?;
            }
        }
    }
    st.history.finished = true;
    if let Some(dir) = &opts.checkpoint_dir {
        st.history.final_patch = Some(dir.join(PATCH_FILE));
        write_checkpoint(dir, &st, set, palette, cfg)?;
    }
    Ok((st.patch, st.history))
}

fn write_checkpoint(
    dir: &Path,
    st: &TrainState,
    set: &SceneSet,
    palette: &Palette,
    cfg: &TrainConfig,
) -> Result<()> {
    let meta = CheckpointMeta {
        seed: cfg.seed,
        epoch: st.epoch,
        objective: st.history.records.last().map_or(f64::NAN, |r| r.loss.total),
        config_hash: config_hash(cfg, palette),
        corpus_hash: corpus_hash(set),
        rng_algorithm: ALGORITHM_ID.into(),
        aspect_hint: st.patch.aspect_hint(),
        config: cfg.clone(),
        palette: palette.colors().to_vec(),
        history: st.history.clone(),
    };
    st.patch.save_png(dir.join(PATCH_FILE))?;
    let mp = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&mp, e))?;
    std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    write_state(&dir.join(STATE_FILE), st)?;
    st.history.write_csv(dir.join(HISTORY_FILE))
}

fn write_state(path: &Path, st: &TrainState) -> Result<()> {
    let mut buf = Vec::with_capacity(40 + st.patch.data().len() * 24);
    buf.extend_from_slice(STATE_MAGIC);
    for v in [
        st.epoch as u64,
        st.adam.t,
        st.patch.height() as u64,
        st.patch.width() as u64,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in st.patch.data().iter().chain(&st.adam.m).chain(&st.adam.v) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint's sidecar and exact optimiser state.
fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, TrainState)> {
    let mp = dir.join(META_FILE);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&mp, e))?;
    let sp = dir.join(STATE_FILE);
    let bytes = std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    let corrupt = |reason: &str| Error::Checkpoint {
        path: sp.clone(),
        reason: reason.to_string(),
    };
    if bytes.len() < 40 || &bytes[..8] != STATE_MAGIC {
        return Err(corrupt("missing state header"));
    }
    let word =
        |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
    let (epoch, t, h, w) = (
        word(0) as usize,
        word(1),
        word(2) as usize,
        word(3) as usize,
    );
    let len = h * w * 3;
    if bytes.len() != 40 + 3 * len * 8 {
        return Err(corrupt("state size does not match patch dimensions"));
    }
    if epoch != meta.epoch || meta.history.records.len() != epoch {
        return Err(corrupt("state epoch disagrees with the sidecar"));
    }
    let floats: Vec<f64> = bytes[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let pixels = RgbImage::from_raw(h, w, floats[..len].to_vec())?;
    let patch = Patch::from_image(pixels)?.with_aspect_hint(meta.aspect_hint)?;
    let adam = Adam {
        cfg: meta.config.adam,
        m: floats[len..2 * len].to_vec(),
        v: floats[2 * len..].to_vec(),
        t,
    };
    let history = meta.history.clone();
    Ok((
        meta,
        TrainState {
            patch,
            adam,
            epoch,
            history,
        },
    ))
}
