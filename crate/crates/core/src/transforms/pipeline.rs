//! Conventional and 3D patch transforms, compositing into scenes, and the
//! reverse pass that carries scene gradients back to patch pixels.

use rand::Rng;

use super::params::TransformParams;
use super::warp::{Border, Resampler};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::patch::Patch;
use crate::rng::SeedableRng;
use crate::scene::PersonBox;

/// Multiplicative shading strength of the wrinkle field slope.
pub const WRINKLE_SHADING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Resample(Resampler),
    Gain(f64),
    /// Per-pixel factor shared by the three channels.
    PixelScale(Vec<f64>),
    /// Per-component pass-through flag; `false` blocks the gradient.
    Gate(Vec<bool>),
}

/// Record of the linear and piecewise-linear steps applied to a patch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tape {
    stages: Vec<Stage>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Pulls a gradient on the transformed image back to the source patch.
    pub fn backward(&self, grad: RgbImage) -> RgbImage {
        let mut g = grad;
        for stage in self.stages.iter().rev() {
            match stage {
                Stage::Resample(r) => g = r.adjoint(&g),
                Stage::Gain(k) => g.data_mut().iter_mut().for_each(|v| *v *= k),
                Stage::PixelScale(f) => {
                    for (px, s) in g.data_mut().chunks_exact_mut(3).zip(f) {
                        px.iter_mut().for_each(|v| *v *= s);
                    }
                }
                Stage::Gate(pass) => {
                    for (v, &p) in g.data_mut().iter_mut().zip(pass) {
                        if !p {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        g
    }
}

/// A transformed patch image, its validity mask in `[0, 1]` and the tape
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pub image: RgbImage,
    pub mask: Vec<f64>,
    pub tape: Tape,
}

impl MaskedImage {
    pub fn from_patch(patch: &Patch) -> Self {
        Self {
            image: patch.pixels().clone(),
            mask: vec![1.0; patch.height() * patch.width()],
            tape: Tape::default(),
        }
    }

    fn resample(&mut self, r: Resampler) {
        self.image = r.apply(&self.image);
        self.mask = r.apply_plane(&self.mask);
        self.tape.stages.push(Stage::Resample(r));
    }

    fn shade(&mut self, factor: Vec<f64>) {
        for (px, s) in self.image.data_mut().chunks_exact_mut(3).zip(&factor) {
            px.iter_mut().for_each(|v| *v *= s);
        }
        self.tape.stages.push(Stage::PixelScale(factor));
    }

    /// Clamps into `[0, 1]`; values strictly outside lose their gradient.
    fn clamp(&mut self) {
        let mut pass = Vec::with_capacity(self.image.data().len());
        for v in self.image.data_mut() {
            pass.push((0.0..=1.0).contains(v));
            *v = v.clamp(0.0, 1.0);
        }
        if pass.iter().any(|p| !p) {
            self.tape.stages.push(Stage::Gate(pass));
        }
    }
}

fn center(h: usize, w: usize) -> (f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

/// In-plane rotation and scaling about the patch centre into a canvas of
/// the original size, then contrast, brightness and uniform noise, clamped.
pub fn apply_conventional(patch: &Patch, p: &TransformParams) -> MaskedImage {
    let (h, w) = (patch.height(), patch.width());
    let (cy, cx) = center(h, w);
    let (sin, cos) = p.rotate_deg.to_radians().sin_cos();
    let inv = 1.0 / p.scale;
    let warp = Resampler::build(h, w, h, w, Border::Invalid, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        Some((
            cy + (-sin * dx + cos * dy) * inv,
            cx + (cos * dx + sin * dy) * inv,
        ))
    });
    let valid = warp.valid().to_vec();

    let mut out = MaskedImage::from_patch(patch);
    out.resample(warp);

    let mut noise_rng = SeedableRng::new(p.noise_seed).stream();
    let mut pass = Vec::with_capacity(h * w * 3);
    for (px, &ok) in out.image.data_mut().chunks_exact_mut(3).zip(&valid) {
        for v in px.iter_mut() {
            let n = if p.noise_amp != 0.0 {
                p.noise_amp * (2.0 * noise_rng.gen::<f64>() - 1.0)
            } else {
                0.0
            };
            if !ok {
                *v = 0.0;
                pass.push(false);
                continue;
            }
            let t = p.contrast_mul * *v + p.brightness_add + n;
            pass.push((0.0..=1.0).contains(&t));
            *v = t.clamp(0.0, 1.0);
        }
    }
    out.tape.stages.push(Stage::Gain(p.contrast_mul));
    out.tape.stages.push(Stage::Gate(pass));
    out
}

/// Zero-mean field on a `grid x grid` lattice scaled to unit peak, then
/// bilinearly upsampled (corner-aligned) to `h x w`.
fn smooth_field(h: usize, w: usize, grid: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut nodes: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean = nodes.iter().sum::<f64>() / nodes.len() as f64;
    nodes.iter_mut().for_each(|v| *v -= mean);
    let peak = nodes.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        nodes.iter_mut().for_each(|v| *v /= peak);
    }
    let gs = (grid - 1) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y as f64 * gs / (h as f64 - 1.0).max(1.0);
        let (y0, fy) = crate::image::split_coord(gy, grid);
        for x in 0..w {
            let gx = x as f64 * gs / (w as f64 - 1.0).max(1.0);
            let (x0, fx) = crate::image::split_coord(gx, grid);
            let at = |yy: usize, xx: usize| nodes[yy * grid + xx];
            out.push(
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)),
            );
        }
    }
    out
}

fn apply_wrinkle(img: &mut MaskedImage, p: &TransformParams) {
    let (h, w) = (img.image.height(), img.image.width());
    let mut rng = SeedableRng::new(p.wrinkle.field_seed).stream();
    let amp = p.wrinkle.amp_px;
    let fx: Vec<f64> = smooth_field(h, w, p.wrinkle.grid_size, &mut rng)
        .into_iter()
        .map(|v| v * amp)
        .collect();
    let fy: Vec<f64> = smooth_field(h, w, p.wrinkle.grid_size, &mut rng)
        .into_iter()
        .map(|v| v * amp)
        .collect();
    let warp = Resampler::build(h, w, h, w, Border::Clamp, |y, x| {
        let i = y * w + x;
        Some((y as f64 + fy[i], x as f64 + fx[i]))
    });
    img.resample(warp);
    let shading: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let slope = (fx[y * w + r] - fx[y * w + l]) / (r - l) as f64;
            (1.0 + WRINKLE_SHADING * slope).max(0.0)
        })
        .collect();
    img.shade(shading);
    img.clamp();
}

/// Wraps the patch around a vertical cylinder: surface position `s` in
/// `[-1, 1]` appears at screen position `sin(s c) / c`, shaded by `cos(s c)`.
fn apply_radian(img: &mut MaskedImage, curvature: f64) {
    let (h, w) = (img.image.height(), img.image.width());
    let (_, cx) = center(h, w);
    let half = cx.max(f64::EPSILON);
    let c = curvature;
    let limit = c.sin();
    let surface = |x: usize| -> Option<f64> {
        let u = (x as f64 - cx) / half;
        let uc = u * c;
        (uc.abs() <= limit + 1e-12).then(|| uc.clamp(-1.0, 1.0).asin() / c)
    };
    let warp = Resampler::build(h, w, h, w, Border::Invalid, |y, x| {
        surface(x).map(|s| (y as f64, cx + s * half))
    });
    img.resample(warp);
    let col_shade: Vec<f64> = (0..w)
        .map(|x| surface(x).map_or(0.0, |s| (s * c).cos()))
        .collect();
    let shading = (0..h * w).map(|i| col_shade[i % w]).collect();
    img.shade(shading);
}

/// Out-of-plane rotation (yaw about the vertical axis, then pitch about the
/// horizontal axis) of the patch plane, viewed by a pinhole of focal length
/// `2 max(h, w)` placed so that the unrotated plane maps pixel-to-pixel.
fn apply_angle(img: &mut MaskedImage, yaw_deg: f64, pitch_deg: f64) {
    let (h, w) = (img.image.height(), img.image.width());
    let (cy, cx) = center(h, w);
    let f = 2.0 * h.max(w) as f64;
    let (sy, cyw) = yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    // rot = Rx(pitch) * Ry(yaw)
    let ry = [[cyw, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cyw]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = (0..3).map(|k| rx[i][k] * ry[k][j]).sum();
        }
    }
    // rotᵀ v
    let rt = |v: [f64; 3]| -> [f64; 3] {
        [
            rot[0][0] * v[0] + rot[1][0] * v[1] + rot[2][0] * v[2],
            rot[0][1] * v[0] + rot[1][1] * v[1] + rot[2][1] * v[2],
            rot[0][2] * v[0] + rot[1][2] * v[1] + rot[2][2] * v[2],
        ]
    };
    let plane_origin = rt([0.0, 0.0, f]);
    let warp = Resampler::build(h, w, h, w, Border::Invalid, |y, x| {
        let ray = rt([x as f64 - cx, y as f64 - cy, f]);
        if ray[2] <= 1e-12 {
            return None;
        }
        let t = plane_origin[2] / ray[2];
        if t <= 0.0 {
            return None;
        }
        Some((
            cy + t * ray[1] - plane_origin[1],
            cx + t * ray[0] - plane_origin[0],
        ))
    });
    img.resample(warp);
}

/// `(y0, x0, rh, rw)` of the occluding rectangle for `fraction` of an
/// `h x w` patch; aspect (width/height) drawn in `[0.5, 2]`.
pub fn occlusion_rect(
    h: usize,
    w: usize,
    fraction: f64,
    rect_seed: u64,
) -> Option<(usize, usize, usize, usize)> {
    if fraction <= 0.0 {
        return None;
    }
    let mut rng = SeedableRng::new(rect_seed).stream();
    let aspect: f64 = rng.gen_range(0.5..=2.0);
    let area = fraction * (h * w) as f64;
    let rh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - rh);
    let x0 = rng.gen_range(0..=w - rw);
    Some((y0, x0, rh, rw))
}

fn apply_occlusion(img: &mut MaskedImage, p: &TransformParams) {
    let (h, w) = (img.image.height(), img.image.width());
    let Some((y0, x0, rh, rw)) = occlusion_rect(h, w, p.occlusion.fraction, p.occlusion.rect_seed)
    else {
        return;
    };
    let mut pass = vec![true; h * w * 3];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            img.image.set(y, x, p.occlusion.fill_rgb);
            let i = (y * w + x) * 3;
            pass[i..i + 3].fill(false);
        }
    }
    img.tape.stages.push(Stage::Gate(pass));
}

/// Per-pixel occlusion flags for `p` on an `h x w` patch.
pub fn occlusion_mask(h: usize, w: usize, p: &TransformParams) -> Vec<bool> {
    let mut out = vec![false; h * w];
    if let Some((y0, x0, rh, rw)) =
        occlusion_rect(h, w, p.occlusion.fraction, p.occlusion.rect_seed)
    {
        for y in y0..y0 + rh {
            out[y * w + x0..y * w + x0 + rw].fill(true);
        }
    }
    out
}

/// Wrinkle, radian, angle, then occlusion. Sub-transforms at their
/// identity values are skipped outright.
pub fn apply_3d(mut img: MaskedImage, p: &TransformParams) -> MaskedImage {
    if p.wrinkle.amp_px != 0.0 {
        apply_wrinkle(&mut img, p);
    }
    if p.curvature > 1e-9 {
        apply_radian(&mut img, p.curvature);
    }
    if p.angle.yaw_deg != 0.0 || p.angle.pitch_deg != 0.0 {
        apply_angle(&mut img, p.angle.yaw_deg, p.angle.pitch_deg);
    }
    if p.occlusion.fraction > 0.0 {
        apply_occlusion(&mut img, p);
    }
    img
}

/// The full patch-side chain: conventional family, then the 3D family.
pub fn transform_patch(patch: &Patch, p: &TransformParams) -> MaskedImage {
    apply_3d(apply_conventional(patch, p), p)
}

/// Pixel rectangle a patch occupies in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub y0: isize,
    pub x0: isize,
    pub height: usize,
    pub width: usize,
}

/// Target rectangle for a patch on `bx` in an `img_h x img_w` image: width
/// `alpha * box width` (rounded), height from the aspect hint, centred on
/// the box horizontally, vertical centre `v_anchor` of the way down the box.
pub fn target_rect(
    img_h: usize,
    img_w: usize,
    bx: &PersonBox,
    aspect: f64,
    p: &TransformParams,
) -> PixelRect {
    let box_w_px = bx.w * img_w as f64;
    let box_h_px = bx.h * img_h as f64;
    let width_f = p.placement.alpha * box_w_px;
    let width = width_f.round().max(0.0) as usize;
    let height = (width_f * aspect).round().max(0.0) as usize;
    let cx = bx.cx * img_w as f64;
    let top = (bx.cy - bx.h / 2.0) * img_h as f64;
    let cy = top + p.placement.v_anchor * box_h_px;
    PixelRect {
        y0: (cy - height as f64 / 2.0).round() as isize,
        x0: (cx - width as f64 / 2.0).round() as isize,
        height,
        width,
    }
}

/// A planned patch placement: clipped target pixels, the patch-to-target
/// sampler and the per-pixel blend weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub rect: PixelRect,
    y_range: (usize, usize),
    x_range: (usize, usize),
    sampler: Resampler,
    alpha: Vec<f64>,
}

impl Placement {
    pub fn plan(
        img_h: usize,
        img_w: usize,
        patch: &MaskedImage,
        bx: &PersonBox,
        aspect: f64,
        p: &TransformParams,
    ) -> Result<Self> {
        let rect = target_rect(img_h, img_w, bx, aspect, p);
        if rect.width == 0 || rect.height == 0 {
            return Err(Error::Placement(format!(
                "degenerate target {}x{} for box {:?}",
                rect.height, rect.width, bx
            )));
        }
        let clip = |start: isize, len: usize, limit: usize| -> (usize, usize) {
            let a = start.max(0) as usize;
            let b = (start + len as isize).clamp(0, limit as isize) as usize;
            (a.min(b), b)
        };
        let y_range = clip(rect.y0, rect.height, img_h);
        let x_range = clip(rect.x0, rect.width, img_w);
        if y_range.0 >= y_range.1 || x_range.0 >= x_range.1 {
            return Err(Error::Placement(format!(
                "target rectangle {rect:?} lies outside the {img_h}x{img_w} image"
            )));
        }
        let (ph, pw) = (patch.image.height(), patch.image.width());
        let (sy, sx) = (
            ph as f64 / rect.height as f64,
            pw as f64 / rect.width as f64,
        );
        let (oh, ow) = (y_range.1 - y_range.0, x_range.1 - x_range.0);
        let sampler = Resampler::build(oh, ow, ph, pw, Border::Clamp, |i, j| {
            let ty = (y_range.0 + i) as f64 - rect.y0 as f64;
            let tx = (x_range.0 + j) as f64 - rect.x0 as f64;
            Some(((ty + 0.5) * sy - 0.5, (tx + 0.5) * sx - 0.5))
        });
        let alpha = sampler.apply_plane(&patch.mask);
        Ok(Self {
            rect,
            y_range,
            x_range,
            sampler,
            alpha,
        })
    }

    /// Clipped region `(x0, y0, x1, y1)` normalised to the image size.
    pub fn region(&self, img_h: usize, img_w: usize) -> [f64; 4] {
        [
            self.x_range.0 as f64 / img_w as f64,
            self.y_range.0 as f64 / img_h as f64,
            self.x_range.1 as f64 / img_w as f64,
            self.y_range.1 as f64 / img_h as f64,
        ]
    }

    pub fn composite(&self, scene: &mut RgbImage, patch: &MaskedImage) {
        let sampled = self.sampler.apply(&patch.image);
        let ow = self.x_range.1 - self.x_range.0;
        for (k, (&a, px)) in self
            .alpha
            .iter()
            .zip(sampled.data().chunks_exact(3))
            .enumerate()
        {
            if a == 0.0 {
                continue;
            }
            let (y, x) = (self.y_range.0 + k / ow, self.x_range.0 + k % ow);
            let s = scene.get(y, x);
            scene.set(
                y,
                x,
                [
                    a * px[0] + (1.0 - a) * s[0],
                    a * px[1] + (1.0 - a) * s[1],
                    a * px[2] + (1.0 - a) * s[2],
                ],
            );
        }
    }

    /// Given the gradient on the composited scene, returns the gradient on
    /// the transformed patch image and rewrites `grad_scene` to the gradient
    /// on the scene as it was before this composite.
    pub fn backward(&self, grad_scene: &mut RgbImage) -> RgbImage {
        let (oh, ow) = self.sampler.out_size();
        let mut g_rect = RgbImage::new(oh, ow);
        for (k, &a) in self.alpha.iter().enumerate() {
            let (y, x) = (self.y_range.0 + k / ow, self.x_range.0 + k % ow);
            let g = grad_scene.get(y, x);
            g_rect.set(k / ow, k % ow, [a * g[0], a * g[1], a * g[2]]);
            grad_scene.set(y, x, [(1.0 - a) * g[0], (1.0 - a) * g[1], (1.0 - a) * g[2]]);
        }
        self.sampler.adjoint(&g_rect)
    }
}

/// Composites `patch` onto `bx` of `scene`, returning the new image and
/// the placement used.
pub fn place_patch(
    scene: &RgbImage,
    patch: &MaskedImage,
    bx: &PersonBox,
    aspect: f64,
    p: &TransformParams,
) -> Result<(RgbImage, Placement)> {
    let placement = Placement::plan(scene.height(), scene.width(), patch, bx, aspect, p)?;
    let mut out = scene.clone();
    placement.composite(&mut out, patch);
    Ok((out, placement))
}

/// One box's contribution to a composited scene.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxComposite {
    pub box_index: usize,
    pub params: TransformParams,
    pub tape: Tape,
    pub placement: Placement,
}

/// A scene with patches composited on some of its boxes, in box order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneComposite {
    pub image: RgbImage,
    pub parts: Vec<BoxComposite>,
}

impl SceneComposite {
    /// Composites each `(box_index, params)` in order; placement failures
    /// skip that box with a warning.
    pub fn build(
        scene_id: &str,
        image: &RgbImage,
        boxes: &[PersonBox],
        patch: &Patch,
        draws: &[(usize, TransformParams)],
    ) -> Self {
        let mut out = image.clone();
        let mut parts = Vec::with_capacity(draws.len());
        for &(box_index, params) in draws {
            let t = transform_patch(patch, &params);
            match Placement::plan(
                out.height(),
                out.width(),
                &t,
                &boxes[box_index],
                patch.aspect_hint(),
                &params,
            ) {
                Ok(placement) => {
                    placement.composite(&mut out, &t);
                    parts.push(BoxComposite {
                        box_index,
                        params,
                        tape: t.tape,
                        placement,
                    });
                }
                Err(e) => log::warn!("scene {scene_id}: skipping box {box_index}: {e}"),
            }
        }
        Self { image: out, parts }
    }

    /// Normalised patch regions, one per composited box.
    pub fn regions(&self) -> Vec<[f64; 4]> {
        let (h, w) = (self.image.height(), self.image.width());
        self.parts
            .iter()
            .map(|p| p.placement.region(h, w))
            .collect()
    }

    /// Gradient on the patch given the gradient on the composited image.
    pub fn backward(&self, grad_image: &RgbImage, patch_h: usize, patch_w: usize) -> RgbImage {
        let mut g = grad_image.clone();
        let mut acc = RgbImage::new(patch_h, patch_w);
        for part in self.parts.iter().rev() {
            let g_patch_img = part.placement.backward(&mut g);
            let gp = part.tape.backward(g_patch_img);
            for (a, b) in acc.data_mut().iter_mut().zip(gp.data()) {
                *a += b;
            }
        }
        acc
    }
}
