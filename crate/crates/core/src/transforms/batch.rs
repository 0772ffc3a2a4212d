//! Batch compositing with per-scene random streams and a replayable
//! parameter log.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{sample_transform_params, EotConfig, TransformParams};
use super::pipeline::SceneComposite;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::patch::Patch;
use crate::rng::SeedableRng;
use crate::scene::{Scene, SceneSet};

pub const COMPOSITION_ORDER: &str = "conventional>3d>placement";

/// One line of the JSON-lines parameter log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub scene_id: String,
    pub scene_index: usize,
    pub box_index: usize,
    pub order: String,
    pub params: TransformParams,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub composites: Vec<SceneComposite>,
    pub log: Vec<ParamsRecord>,
}

impl Batch {
    pub fn images(&self) -> Vec<&RgbImage> {
        self.composites.iter().map(|c| &c.image).collect()
    }
}

/// Draws parameters for every person box of `scene` from the stream
/// derived for `scene_index`, then composites.
pub fn composite_scene(
    scene: &Scene,
    scene_index: usize,
    patch: &Patch,
    cfg: &EotConfig,
    rng: &SeedableRng,
) -> (SceneComposite, Vec<ParamsRecord>) {
    let mut stream = rng.derive(scene_index as u64).stream();
    let draws: Vec<(usize, TransformParams)> = scene
        .boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_person())
        .map(|(i, _)| (i, sample_transform_params(cfg, &mut stream)))
        .collect();
    let composite = SceneComposite::build(&scene.id, &scene.image, &scene.boxes, patch, &draws);
    let log = draws
        .iter()
        .map(|&(box_index, params)| ParamsRecord {
            scene_id: scene.id.clone(),
            scene_index,
            box_index,
            order: COMPOSITION_ORDER.to_string(),
            params,
        })
        .collect();
    (composite, log)
}

/// Composites `patch` onto every person box of every scene. Scenes are
/// processed in parallel; each draws from its own derived stream so the
/// result is independent of scheduling.
pub fn batch_apply(
    scenes: &SceneSet,
    patch: &Patch,
    cfg: &EotConfig,
    rng: &SeedableRng,
) -> Result<Batch> {
    if scenes.is_empty() {
        return Err(Error::Config("batch_apply needs at least one scene".into()));
    }
    let results: Vec<(SceneComposite, Vec<ParamsRecord>)> = scenes
        .scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| composite_scene(s, i, patch, cfg, rng))
        .collect();
    let mut composites = Vec::with_capacity(results.len());
    let mut log = Vec::new();
    for (c, l) in results {
        composites.push(c);
        log.extend(l);
    }
    Ok(Batch { composites, log })
}

/// Rebuilds a batch from a logged set of parameters.
pub fn replay_batch(scenes: &SceneSet, patch: &Patch, log: &[ParamsRecord]) -> Result<Batch> {
    let mut composites = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.scenes.iter().enumerate() {
        let mut draws = Vec::new();
        for r in log.iter().filter(|r| r.scene_index == i) {
            if r.scene_id != scene.id || r.box_index >= scene.boxes.len() {
                return Err(Error::Config(format!(
                    "params record for {:?}/box {} does not match scene {:?}",
                    r.scene_id, r.box_index, scene.id
                )));
            }
            draws.push((r.box_index, r.params));
        }
        composites.push(SceneComposite::build(
            &scene.id,
            &scene.image,
            &scene.boxes,
            patch,
            &draws,
        ));
    }
    Ok(Batch {
        composites,
        log: log.to_vec(),
    })
}

pub fn write_params_log(path: impl AsRef<Path>, log: &[ParamsRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in log {
        let line = serde_json::to_string(r).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_params_log(path: impl AsRef<Path>) -> Result<Vec<ParamsRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}
