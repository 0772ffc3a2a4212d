//! Procedural 64x64 scenes for the toy detector: stick-figure persons,
//! coloured balls and crates over a textured background.

use rand::Rng;

use crate::error::Result;
use crate::image::RgbImage;
use crate::rng::SeedableRng;
use crate::scene::{PersonBox, Scene, SceneSet, SplitTag};

pub const SCENE_SIZE: usize = 64;
pub const BALL_CLASS: u32 = 1;
pub const CRATE_CLASS: u32 = 2;

const CELL: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Object {
    Person { body: [f64; 3], head: [f64; 3] },
    Ball { color: [f64; 3] },
    Crate { fill: [f64; 3] },
}

impl Object {
    fn label(&self) -> u32 {
        match self {
            Object::Person { .. } => 0,
            Object::Ball { .. } => BALL_CLASS,
            Object::Crate { .. } => CRATE_CLASS,
        }
    }
}

/// Pixel-space box `(x0, y0, w, h)`.
type PxBox = (f64, f64, f64, f64);

fn background(rng: &mut impl Rng) -> RgbImage {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.08..0.35));
    let tilt: [f64; 2] = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let freq = rng.gen_range(0.15..0.45);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let n = SCENE_SIZE as f64;
    let mut img = RgbImage::from_fn(SCENE_SIZE, SCENE_SIZE, |y, x| {
        let (u, v) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
        let wave = 0.04 * ((x as f64 + 0.7 * y as f64) * freq + phase).sin();
        std::array::from_fn(|k| base[k] + tilt[0] * u + tilt[1] * v + wave)
    });
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    img
}

fn fill_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, rgb: [f64; 3]) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.set(y, x, rgb);
            }
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [f64; 3]) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px >= x0 && px < x1 && py >= y0 && py < y1 {
                img.set(y, x, rgb);
            }
        }
    }
}

fn draw(img: &mut RgbImage, obj: &Object, (x0, y0, w, h): PxBox) {
    match *obj {
        Object::Person { body, head } => {
            let head_r = w * 0.3;
            fill_ellipse(img, x0 + w / 2.0, y0 + head_r, head_r, head_r, head);
            let body_top = y0 + 2.0 * head_r;
            let body_h = h - 2.0 * head_r;
            fill_ellipse(
                img,
                x0 + w / 2.0,
                body_top + body_h / 2.0,
                w / 2.0,
                body_h / 2.0,
                body,
            );
        }
        Object::Ball { color } => {
            fill_ellipse(img, x0 + w / 2.0, y0 + h / 2.0, w / 2.0, h / 2.0, color)
        }
        Object::Crate { fill } => {
            fill_rect(img, x0, y0, x0 + w, y0 + h, [0.1, 0.25, 0.05]);
            let b = (w * 0.15).max(1.5);
            fill_rect(img, x0 + b, y0 + b, x0 + w - b, y0 + h - b, fill);
        }
    }
}

fn random_object(rng: &mut impl Rng, person: bool) -> (Object, f64, f64) {
    if person {
        let body = std::array::from_fn(|_| rng.gen_range(0.75..1.0));
        let head = [
            rng.gen_range(0.8..0.95),
            rng.gen_range(0.6..0.8),
            rng.gen_range(0.45..0.65),
        ];
        let w = rng.gen_range(16.0..24.0_f64).round();
        let h = rng.gen_range(30.0..44.0_f64).round();
        return (Object::Person { body, head }, w, h);
    }
    if rng.gen_bool(0.5) {
        let color = if rng.gen_bool(0.5) {
            [
                rng.gen_range(0.8..1.0),
                rng.gen_range(0.0..0.15),
                rng.gen_range(0.0..0.15),
            ]
        } else {
            [
                rng.gen_range(0.0..0.15),
                rng.gen_range(0.1..0.3),
                rng.gen_range(0.8..1.0),
            ]
        };
        let d = rng.gen_range(12.0..18.0_f64).round();
        (Object::Ball { color }, d, d)
    } else {
        let fill = [
            rng.gen_range(0.1..0.3),
            rng.gen_range(0.6..0.85),
            rng.gen_range(0.1..0.3),
        ];
        let s = rng.gen_range(12.0..18.0_f64).round();
        (Object::Crate { fill }, s, s)
    }
}

fn cell_of(b: &PxBox) -> (usize, usize) {
    let cx = b.0 + b.2 / 2.0;
    let cy = b.1 + b.3 / 2.0;
    ((cy / CELL) as usize, (cx / CELL) as usize)
}

fn overlaps(a: &PxBox, b: &PxBox) -> bool {
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
}

/// One random scene: one or two persons plus up to two distractors, no two
/// objects overlapping or centred in the same grid cell.
pub fn synthetic_scene(id: &str, rng: &SeedableRng) -> Scene {
    let mut r = rng.stream();
    let mut image = background(&mut r);
    let persons = if r.gen_bool(0.3) { 2 } else { 1 };
    let distractors = r.gen_range(0..=2);
    let n = SCENE_SIZE as f64;
    let mut placed: Vec<(Object, PxBox)> = Vec::new();
    for i in 0..persons + distractors {
        let want_person = i < persons;
        for _ in 0..200 {
            let (obj, w, h) = random_object(&mut r, want_person);
            let x0 = r.gen_range(0.0..=(n - w)).round();
            let y0 = r.gen_range(0.0..=(n - h)).round();
            let b = (x0, y0, w, h);
            if placed
                .iter()
                .all(|(_, p)| !overlaps(p, &b) && cell_of(p) != cell_of(&b))
            {
                placed.push((obj, b));
                break;
            }
        }
    }
    for (obj, b) in &placed {
        draw(&mut image, obj, *b);
    }
    let boxes = placed
        .iter()
        .map(|(obj, (x0, y0, w, h))| PersonBox {
            cx: (x0 + w / 2.0) / n,
            cy: (y0 + h / 2.0) / n,
            w: w / n,
            h: h / n,
            label: obj.label(),
        })
        .collect();
    Scene {
        id: id.to_string(),
        image,
        boxes,
    }
}

/// A scene with background texture only.
pub fn background_scene(id: &str, rng: &SeedableRng) -> Scene {
    Scene {
        id: id.to_string(),
        image: background(&mut rng.stream()),
        boxes: Vec::new(),
    }
}

/// `count` scenes with ids `<split>_0000`, `<split>_0001`, ...
pub fn synthetic_set(count: usize, seed: u64, split: SplitTag) -> Result<SceneSet> {
    let root = SeedableRng::new(seed);
    let prefix = match split {
        SplitTag::Train => "train",
        SplitTag::Test => "test",
    };
    let scenes = (0..count)
        .map(|i| synthetic_scene(&format!("{prefix}_{i:04}"), &root.derive(i as u64)))
        .collect();
    SceneSet::new(scenes, split)
}

/// A fixed single-person scene used as a detector sanity check.
pub fn canonical_person_scene() -> Scene {
    let mut image = RgbImage::from_fn(SCENE_SIZE, SCENE_SIZE, |y, x| {
        let v = 0.18 + 0.06 * ((x + y) as f64 / 128.0);
        [v, v * 1.1, v * 0.9]
    });
    let b = (22.0, 13.0, 20.0, 38.0);
    let person = Object::Person {
        body: [0.9, 0.85, 0.8],
        head: [0.88, 0.7, 0.55],
    };
    draw(&mut image, &person, b);
    let n = SCENE_SIZE as f64;
    Scene {
        id: "canonical".into(),
        image,
        boxes: vec![PersonBox {
            cx: (b.0 + b.2 / 2.0) / n,
            cy: (b.1 + b.3 / 2.0) / n,
            w: b.2 / n,
            h: b.3 / n,
            label: 0,
        }],
    }
}
