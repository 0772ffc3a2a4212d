//! Minimal line-plot rasteriser (axes, light grid, one coloured polyline
//! per series, legend swatches). No text rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;
const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// File stem of the rendered plot.
    pub name: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

struct Canvas {
    img: image::RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && x < WIDTH as i64 && y < HEIGHT as i64 {
            self.img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    }

    fn line(
        &mut self,
        (mut x0, mut y0): (i64, i64),
        (x1, y1): (i64, i64),
        c: [u8; 3],
        thick: bool,
    ) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if thick {
                self.put(x0 + 1, y0, c);
                self.put(x0, y0 + 1, c);
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if lo > hi {
        return None;
    }
    if hi - lo < 1e-12 {
        return Some((lo - 0.5, hi + 0.5));
    }
    Some((lo, hi))
}

/// Renders `curve` as a PNG at `path`.
pub fn render_line_plot(curve: &Curve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut cv = Canvas {
        img: image::RgbImage::from_pixel(WIDTH, HEIGHT, image::Rgb([255, 255, 255])),
    };
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let (left, right, top, bottom) = (MARGIN, w - MARGIN, MARGIN, h - MARGIN);
    for i in 1..5 {
        let y = bottom - (bottom - top) * i / 5;
        cv.line((left, y), (right, y), [225, 225, 225], false);
    }
    cv.line((left, bottom), (right, bottom), [0, 0, 0], false);
    cv.line((left, bottom), (left, top), [0, 0, 0], false);

    let xb = bounds(curve.x.iter().copied());
    let yb = bounds(curve.series.iter().flat_map(|(_, v)| v.iter().copied()));
    if let (Some((x0, x1)), Some((y0, y1))) = (xb, yb) {
        let px = |x: f64| left + ((x - x0) / (x1 - x0) * (right - left) as f64).round() as i64;
        let py = |y: f64| bottom - ((y - y0) / (y1 - y0) * (bottom - top) as f64).round() as i64;
        for (k, (_, values)) in curve.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<(i64, i64)> = curve
                .x
                .iter()
                .zip(values)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(&x, &y)| (px(x), py(y)))
                .collect();
            if let [only] = pts.as_slice() {
                cv.put(only.0, only.1, color);
            }
            for pair in pts.windows(2) {
                cv.line(pair[0], pair[1], color, true);
            }
            let sy = 8 + 12 * k as i64;
            for dy in 0..8 {
                cv.line((right - 20, sy + dy), (right - 8, sy + dy), color, false);
            }
        }
    }
    cv.img.save(path).map_err(|e| Error::ImageEncode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
