//! Bilinear resampling as an explicit sparse linear map.
//!
//! Every geometric step in the patch pipeline moves pixels along
//! coordinates that depend only on transform parameters, never on pixel
//! values, so each step is linear in the patch. Storing the four taps per
//! output pixel gives the forward pass and its exact adjoint.

use crate::image::{split_coord, RgbImage};

const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Coordinates outside the source grid produce an invalid (zero) pixel.
    Invalid,
    /// Coordinates are clamped onto the source grid.
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
    taps: Vec<[(u32, f64); 4]>,
    valid: Vec<bool>,
}

impl Resampler {
    /// `source(y, x)` gives the continuous source coordinate `(sy, sx)` of
    /// output pixel `(y, x)`, or `None` if the pixel has no source.
    pub fn build(
        out_h: usize,
        out_w: usize,
        in_h: usize,
        in_w: usize,
        border: Border,
        source: impl Fn(usize, usize) -> Option<(f64, f64)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        let mut valid = Vec::with_capacity(out_h * out_w);
        let (maxy, maxx) = ((in_h - 1) as f64, (in_w - 1) as f64);
        for y in 0..out_h {
            for x in 0..out_w {
                let coord = source(y, x).and_then(|(sy, sx)| {
                    if !(sy.is_finite() && sx.is_finite()) {
                        return None;
                    }
                    match border {
                        Border::Clamp => Some((sy.clamp(0.0, maxy), sx.clamp(0.0, maxx))),
                        Border::Invalid => {
                            let inside = sy >= -EDGE_TOL
                                && sy <= maxy + EDGE_TOL
                                && sx >= -EDGE_TOL
                                && sx <= maxx + EDGE_TOL;
                            inside.then(|| (sy.clamp(0.0, maxy), sx.clamp(0.0, maxx)))
                        }
                    }
                });
                match coord {
                    Some((sy, sx)) => {
                        let (y0, fy) = split_coord(sy, in_h);
                        let (x0, fx) = split_coord(sx, in_w);
                        let y1 = (y0 + 1).min(in_h - 1);
                        let x1 = (x0 + 1).min(in_w - 1);
                        let idx = |yy: usize, xx: usize| (yy * in_w + xx) as u32;
                        taps.push([
                            (idx(y0, x0), (1.0 - fy) * (1.0 - fx)),
                            (idx(y0, x1), (1.0 - fy) * fx),
                            (idx(y1, x0), fy * (1.0 - fx)),
                            (idx(y1, x1), fy * fx),
                        ]);
                        valid.push(true);
                    }
                    None => {
                        taps.push([(0, 0.0); 4]);
                        valid.push(false);
                    }
                }
            }
        }
        Self {
            out_h,
            out_w,
            in_h,
            in_w,
            taps,
            valid,
        }
    }

    /// Pixel-centre aligned resize with clamped borders.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let sy = in_h as f64 / out_h as f64;
        let sx = in_w as f64 / out_w as f64;
        Self::build(out_h, out_w, in_h, in_w, Border::Clamp, |y, x| {
            Some(((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5))
        })
    }

    pub fn out_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn in_size(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        debug_assert_eq!((img.height(), img.width()), (self.in_h, self.in_w));
        let src = img.data();
        let mut out = vec![0.0; self.out_h * self.out_w * 3];
        for (o, taps) in out.chunks_exact_mut(3).zip(&self.taps) {
            for &(i, w) in taps {
                if w != 0.0 {
                    let i = i as usize * 3;
                    o[0] += w * src[i];
                    o[1] += w * src[i + 1];
                    o[2] += w * src[i + 2];
                }
            }
        }
        RgbImage::from_raw(self.out_h, self.out_w, out).expect("resampler output shape")
    }

    /// Resamples a single-channel plane; invalid pixels get 0.
    pub fn apply_plane(&self, plane: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|taps| {
                taps.iter()
                    .map(|&(i, w)| if w != 0.0 { w * plane[i as usize] } else { 0.0 })
                    .sum()
            })
            .collect()
    }

    /// Transpose of `apply`: scatters output gradients onto the source.
    pub fn adjoint(&self, grad: &RgbImage) -> RgbImage {
        debug_assert_eq!((grad.height(), grad.width()), (self.out_h, self.out_w));
        let g = grad.data();
        let mut out = vec![0.0; self.in_h * self.in_w * 3];
        for (gp, taps) in g.chunks_exact(3).zip(&self.taps) {
            for &(i, w) in taps {
                if w != 0.0 {
                    let i = i as usize * 3;
                    out[i] += w * gp[0];
                    out[i + 1] += w * gp[1];
                    out[i + 2] += w * gp[2];
                }
            }
        }
        RgbImage::from_raw(self.in_h, self.in_w, out).expect("resampler input shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let r = Resampler::build(7, 9, 5, 6, Border::Invalid, |y, x| {
            Some((y as f64 * 0.7 - 0.3, x as f64 * 0.55 + 0.2))
        });
        let a = random_image(5, 6, 1);
        let b = random_image(7, 9, 2);
        let lhs: f64 = r
            .apply(&a)
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x * y)
            .sum();
        let rhs: f64 = a
            .data()
            .iter()
            .zip(r.adjoint(&b).data())
            .map(|(x, y)| x * y)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn integer_coordinates_copy_exactly() {
        let img = random_image(4, 5, 3);
        let r = Resampler::build(4, 5, 4, 5, Border::Invalid, |y, x| {
            Some((y as f64, x as f64))
        });
        assert_eq!(r.apply(&img), img);
    }

    #[test]
    fn out_of_range_is_invalid_or_clamped() {
        let img = RgbImage::filled(3, 3, [1.0, 1.0, 1.0]);
        let inv = Resampler::build(1, 1, 3, 3, Border::Invalid, |_, _| Some((-1.0, 0.0)));
        assert_eq!(inv.apply(&img).get(0, 0), [0.0; 3]);
        assert!(!inv.valid()[0]);
        let cl = Resampler::build(1, 1, 3, 3, Border::Clamp, |_, _| Some((-1.0, 0.0)));
        assert_eq!(cl.apply(&img).get(0, 0), [1.0; 3]);
    }

    #[test]
    fn resize_matches_image_resize() {
        let img = random_image(9, 13, 4);
        let r = Resampler::resize(9, 13, 5, 4);
        let a = r.apply(&img);
        let b = img.resize_bilinear(5, 4);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
