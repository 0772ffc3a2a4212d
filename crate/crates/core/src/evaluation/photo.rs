//! Evaluation over photo or pre-extracted frame batches laid out as
//! `<root>/<scene>/<distance>/<angle>/*.{png,jpg,jpeg}`.
//!
//! No boxes are needed: an image with `k` declared persons counts
//! `k - min(k, person detections)` of them as undetected. `k` comes from the
//! nearest `meta.json` (`{"persons_per_image": k}`) between the condition
//! directory and the root, defaulting to 1.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attack_success_rate, persons_in, EvalConfig, EvalOutcome};
use crate::detector::DetectorAdapter;
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const META_JSON: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConditionKey {
    pub scene_tag: String,
    pub distance_tag: String,
    pub angle_tag: String,
}

impl fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.scene_tag, self.distance_tag, self.angle_tag
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub key: ConditionKey,
    pub persons_per_image: usize,
    pub images: Vec<String>,
    /// Person detections per evaluated image, aligned with `images`.
    pub detections: Vec<usize>,
    pub skipped: Vec<String>,
    pub n_all: usize,
    pub n_undetected: usize,
    pub rs_percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotoReport {
    pub conditions: Vec<ConditionResult>,
}

impl PhotoReport {
    pub fn rows(&self) -> Vec<super::ReportRow> {
        self.conditions
            .iter()
            .map(|c| super::ReportRow {
                condition: c.key.to_string(),
                n_all: c.n_all,
                n_undetected: c.n_undetected,
                rs_percent: c.rs_percent,
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct DirMeta {
    persons_per_image: usize,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn persons_per_image(root: &Path, leaf: &Path) -> Result<usize> {
    let mut dir = Some(leaf);
    while let Some(d) = dir {
        let p = d.join(META_JSON);
        if p.is_file() {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let meta: DirMeta = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
            if meta.persons_per_image == 0 {
                return Err(Error::Evaluation(format!(
                    "{}: persons_per_image must be at least 1",
                    p.display()
                )));
            }
            return Ok(meta.persons_per_image);
        }
        if d == root {
            break;
        }
        dir = d.parent();
    }
    Ok(1)
}

fn name_of(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn eval_condition(
    root: &Path,
    leaf: &Path,
    key: ConditionKey,
    det: &dyn DetectorAdapter,
    cfg: &EvalConfig,
) -> Result<ConditionResult> {
    let k = persons_per_image(root, leaf)?;
    let mut files: Vec<PathBuf> = fs::read_dir(leaf)
        .map_err(|e| Error::io(leaf, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Evaluation(format!(
            "condition {key} has no images in {}",
            leaf.display()
        )));
    }
    let results: Vec<(String, Option<usize>)> = files
        .par_iter()
        .map(|f| -> Result<(String, Option<usize>)> {
            match RgbImage::load(f) {
                Ok(img) => Ok((name_of(f), Some(persons_in(det, &img, cfg)?.len()))),
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    Ok((name_of(f), None))
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut images = Vec::new();
    let mut detections = Vec::new();
    let mut skipped = Vec::new();
    for (name, d) in results {
        match d {
            Some(n) => {
                images.push(name);
                detections.push(n);
            }
            None => skipped.push(name),
        }
    }
    if images.is_empty() {
        return Err(Error::Evaluation(format!(
            "condition {key}: no decodable images"
        )));
    }
    let n_all = k * images.len();
    let n_undetected = detections.iter().map(|&d| k - d.min(k)).sum();
    let rs_percent = attack_success_rate(&EvalOutcome::new(n_all, n_undetected)?)?;
    Ok(ConditionResult {
        key,
        persons_per_image: k,
        images,
        detections,
        skipped,
        n_all,
        n_undetected,
        rs_percent,
    })
}

/// Evaluates every `<scene>/<distance>/<angle>` directory under `root`,
/// sorted by key.
pub fn photo_eval(
    root: impl AsRef<Path>,
    det: &dyn DetectorAdapter,
    cfg: &EvalConfig,
) -> Result<PhotoReport> {
    let root = root.as_ref();
    let mut conditions = Vec::new();
    for scene_dir in sorted_subdirs(root)? {
        for dist_dir in sorted_subdirs(&scene_dir)? {
            for angle_dir in sorted_subdirs(&dist_dir)? {
                let key = ConditionKey {
                    scene_tag: name_of(&scene_dir),
                    distance_tag: name_of(&dist_dir),
                    angle_tag: name_of(&angle_dir),
                };
                conditions.push(eval_condition(root, &angle_dir, key, det, cfg)?);
            }
        }
    }
    if conditions.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} has no <scene>/<distance>/<angle> directories",
            root.display()
        )));
    }
    conditions.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(PhotoReport { conditions })
}
