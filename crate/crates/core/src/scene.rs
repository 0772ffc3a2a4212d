//! Annotated scenes and corpus ingestion.
//!
//! A corpus root holds `images/` and `annotations/`. Each image
//! `images/<id>.<png|jpg|jpeg>` may have `annotations/<id>.txt` with lines
//! `<class_id> <cx> <cy> <w> <h>` in normalised centre-size form.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const PERSON_CLASS: u32 = 0;

const BOUNDS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub label: u32,
}

impl PersonBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, label: u32) -> Result<Self, String> {
        let b = Self {
            cx,
            cy,
            w,
            h,
            label,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn person(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, String> {
        Self::new(cx, cy, w, h, PERSON_CLASS)
    }

    pub fn validate(&self) -> Result<(), String> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite box coordinate".into());
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!(
                "box size must be positive (w={}, h={})",
                self.w, self.h
            ));
        }
        let (x0, x1) = (self.cx - self.w / 2.0, self.cx + self.w / 2.0);
        let (y0, y1) = (self.cy - self.h / 2.0, self.cy + self.h / 2.0);
        if x0 < -BOUNDS_TOL || x1 > 1.0 + BOUNDS_TOL || y0 < -BOUNDS_TOL || y1 > 1.0 + BOUNDS_TOL {
            return Err(format!(
                "box extends outside the image: x in [{x0}, {x1}], y in [{y0}, {y1}]"
            ));
        }
        Ok(())
    }

    pub fn is_person(&self) -> bool {
        self.label == PERSON_CLASS
    }

    /// `(x0, y0, x1, y1)` in normalised coordinates.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: RgbImage,
    pub boxes: Vec<PersonBox>,
}

impl Scene {
    pub fn person_boxes(&self) -> impl Iterator<Item = &PersonBox> {
        self.boxes.iter().filter(|b| b.is_person())
    }

    pub fn person_count(&self) -> usize {
        self.person_boxes().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Config(format!(
                "split tag must be train or test, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
    pub split: SplitTag,
}

impl SceneSet {
    /// Builds a set, sorting by id and rejecting duplicate ids.
    pub fn new(mut scenes: Vec<Scene>, split: SplitTag) -> Result<Self> {
        scenes.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = scenes.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Config(format!("duplicate scene id {:?}", w[0].id)));
        }
        Ok(Self { scenes, split })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn person_count(&self) -> usize {
        self.scenes.iter().map(Scene::person_count).sum()
    }

    /// Writes the set in the on-disk corpus layout (16-bit PNG images).
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let images = root.join("images");
        let annotations = root.join("annotations");
        for dir in [&images, &annotations] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for scene in &self.scenes {
            scene
                .image
                .save_png16(images.join(format!("{}.png", scene.id)))?;
            let text: String = scene
                .boxes
                .iter()
                .map(|b| format!("{} {} {} {} {}\n", b.label, b.cx, b.cy, b.w, b.h))
                .collect();
            let path = annotations.join(format!("{}.txt", scene.id));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn load_scene_set(root: impl AsRef<Path>, split: SplitTag) -> Result<SceneSet> {
    let root = root.as_ref();
    let image_dir = root.join("images");
    let ann_dir = root.join("annotations");

    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&image_dir, e))?.path();
        if !is_image_file(&path) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = files.insert(stem.to_string(), path.clone()) {
            return Err(Error::Config(format!(
                "two images share the id {stem:?}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }

    let mut scenes = Vec::with_capacity(files.len());
    for (id, path) in files {
        let image = RgbImage::load(&path)?;
        let ann = ann_dir.join(format!("{id}.txt"));
        let boxes = if ann.exists() {
            let text = fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
            parse_annotations(&text, &ann)?
        } else {
            Vec::new()
        };
        scenes.push(Scene { id, image, boxes });
    }
    SceneSet::new(scenes, split)
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<PersonBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let label: u32 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number {f:?}")))?;
        }
        boxes.push(PersonBox::new(v[0], v[1], v[2], v[3], label).map_err(err)?);
    }
    Ok(boxes)
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_line_maps_fields() {
        let boxes = parse_annotations("0 0.5 0.5 0.2 0.4\n", Path::new("a.txt")).unwrap();
        assert_eq!(
            boxes,
            vec![PersonBox {
                cx: 0.5,
                cy: 0.5,
                w: 0.2,
                h: 0.4,
                label: PERSON_CLASS
            }]
        );
    }

    #[test]
    fn out_of_bounds_box_names_file_and_line() {
        let err = parse_annotations("0 0.5 0.5 0.2 0.4\n0 1.0 0.5 0.2 0.2\n", Path::new("b.txt"))
            .unwrap_err();
        match err {
            Error::Annotation { path, line, .. } => {
                assert_eq!(path, Path::new("b.txt"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_text("0 1.0 0.5 0.2 0.2").contains("b.txt:1"));
    }

    fn err_text(line: &str) -> String {
        parse_annotations(line, Path::new("b.txt"))
            .unwrap_err()
            .to_string()
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_annotations("0 0.5 0.5 0.2", Path::new("c.txt")).is_err());
        assert!(parse_annotations("x 0.5 0.5 0.2 0.2", Path::new("c.txt")).is_err());
        assert!(parse_annotations("0 0.5 0.5 0 0.2", Path::new("c.txt")).is_err());
    }

    #[test]
    fn boundary_tolerance() {
        assert!(PersonBox::person(0.9, 0.5, 0.2 + 1e-7, 0.2).is_ok());
        assert!(PersonBox::person(0.9, 0.5, 0.2 + 1e-5, 0.2).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = Scene {
            id: "a".into(),
            image: RgbImage::new(2, 2),
            boxes: vec![],
        };
        assert!(SceneSet::new(vec![s.clone(), s], SplitTag::Train).is_err());
    }
}
