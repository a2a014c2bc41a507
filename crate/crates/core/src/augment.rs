//! Weak (flip), strong (photometric + cutout) and mosaic augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruth};
use crate::synth::{gaussian_blur, Scene};
use crate::tensor::Tensor;

/// Mirrors a `[C,H,W]` image left-right.
pub fn flip_image<R: crate::Real>(image: &Tensor<R>) -> Tensor<R> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for row in 0..c * h {
        let src = &image.data()[row * w..(row + 1) * w];
        let dst = &mut out.data_mut()[row * w..(row + 1) * w];
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

/// `(x1,y1,x2,y2) → (W−x2, y1, W−x1, y2)`.
pub fn flip_box(b: &BBox, width: f32) -> BBox {
    BBox::new(width - b.x2, b.y1, width - b.x1, b.y2)
}

pub fn flip_scene(scene: &Scene) -> Scene {
    let w = scene.size().1 as f32;
    Scene {
        id: scene.id.clone(),
        image: flip_image(&scene.image),
        annotations: scene
            .annotations
            .iter()
            .map(|g| GroundTruth {
                bbox: flip_box(&g.bbox, w),
                class_id: g.class_id,
            })
            .collect(),
    }
}

/// Horizontal flip with probability 0.5. Returns the view and whether it
/// was flipped.
pub fn weak_augment(scene: &Scene, rng: &mut impl Rng) -> (Scene, bool) {
    if rng.gen_bool(0.5) {
        (flip_scene(scene), true)
    } else {
        (scene.clone(), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongAugParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_sigma: (f32, f32),
    pub blur_p: f64,
    pub cutout_count: (usize, usize),
    /// Patch side as a fraction of the image side.
    pub cutout_size: (f32, f32),
    pub cutout_fill: f32,
    pub cutout_p: f64,
}

impl Default for StrongAugParams {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_sigma: (0.1, 2.0),
            blur_p: 0.5,
            cutout_count: (1, 3),
            cutout_size: (0.05, 0.2),
            cutout_fill: 0.5,
            cutout_p: 0.7,
        }
    }
}

impl StrongAugParams {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            cutout_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [self.jitter_p, self.grayscale_p, self.blur_p, self.cutout_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("augmentation probabilities must lie in [0,1]".into());
        }
        if !(self.brightness >= 0.0 && self.contrast >= 0.0 && self.saturation >= 0.0) {
            return Err("jitter deltas must be non-negative".into());
        }
        if !(0.0 <= self.blur_sigma.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err("blur sigma range must satisfy 0 <= lo <= hi".into());
        }
        if self.cutout_count.0 > self.cutout_count.1 {
            return Err("cutout count range is inverted".into());
        }
        if !(0.0 < self.cutout_size.0 && self.cutout_size.0 <= self.cutout_size.1 && self.cutout_size.1 <= 1.0) {
            return Err("cutout size range must satisfy 0 < lo <= hi <= 1".into());
        }
        Ok(())
    }
}

fn gray_plane(image: &Tensor<f32>) -> Vec<f32> {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..plane).map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]).collect()
}

fn factor(delta: f32, rng: &mut impl Rng) -> f32 {
    if delta > 0.0 {
        rng.gen_range((1.0 - delta).max(0.0)..=1.0 + delta)
    } else {
        1.0
    }
}

/// Sets the `w×h` rectangle at `(x, y)` of every channel to `fill`.
pub fn cutout(image: &mut Tensor<f32>, x: usize, y: usize, w: usize, h: usize, fill: f32) {
    let (c, ih, iw) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    for ch in 0..c {
        for yy in y..(y + h).min(ih) {
            let row = (ch * ih + yy) * iw;
            image.data_mut()[row + x.min(iw)..row + (x + w).min(iw)].fill(fill);
        }
    }
}

/// Photometric jitter, grayscale, blur and cutout on an RGB image; values
/// are clamped to `[0,1]`. Geometry is untouched.
pub fn strong_augment_image(image: &Tensor<f32>, p: &StrongAugParams, rng: &mut impl Rng) -> Tensor<f32> {
    let mut img = image.clone();
    let plane = img.shape()[1] * img.shape()[2];
    if rng.gen_bool(p.jitter_p) {
        let b = factor(p.brightness, rng);
        img.data_mut().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        let c = factor(p.contrast, rng);
        let mean = gray_plane(&img).iter().sum::<f32>() / plane as f32;
        img.data_mut().iter_mut().for_each(|v| *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0));
        let s = factor(p.saturation, rng);
        let gray = gray_plane(&img);
        for ch in 0..3 {
            for (v, g) in img.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(&gray) {
                *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
            }
        }
    }
    if rng.gen_bool(p.grayscale_p) {
        let gray = gray_plane(&img);
        for ch in 0..3 {
            img.data_mut()[ch * plane..(ch + 1) * plane].copy_from_slice(&gray);
        }
    }
    if rng.gen_bool(p.blur_p) {
        let sigma = rng.gen_range(p.blur_sigma.0..=p.blur_sigma.1);
        gaussian_blur(&mut img, sigma);
    }
    if rng.gen_bool(p.cutout_p) {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        for _ in 0..rng.gen_range(p.cutout_count.0..=p.cutout_count.1) {
            let side = |full: usize, rng: &mut dyn rand::RngCore| -> usize {
                ((rng.gen_range(p.cutout_size.0..=p.cutout_size.1) * full as f32).round() as usize).clamp(1, full)
            };
            let (pw, ph) = (side(w, rng), side(h, rng));
            let x = rng.gen_range(0..=w - pw);
            let y = rng.gen_range(0..=h - ph);
            cutout(&mut img, x, y, pw, ph, p.cutout_fill);
        }
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

pub fn strong_augment(scene: &Scene, p: &StrongAugParams, rng: &mut impl Rng) -> Scene {
    Scene {
        id: scene.id.clone(),
        image: strong_augment_image(&scene.image, p, rng),
        annotations: scene.annotations.clone(),
    }
}

/// Bilinear resize of a `[C,H,W]` image with half-pixel centres (an exact
/// 2×2 average for a factor-2 reduction).
pub fn resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let (sy, sx) = (h as f32 / out_h as f32, w as f32 / out_w as f32);
    let coord = |o: usize, scale: f32, n: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f32)
    };
    for ch in 0..c {
        let src = &image.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, sx, w);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.data_mut()[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Smallest box side kept after mosaic rescaling.
pub const MOSAIC_MIN_SIDE: f32 = 2.0;

/// 2×2 composite of four equally sized scenes (row-major quadrant order),
/// resized to `out_size`. Boxes are scaled and offset into their quadrant;
/// boxes thinner than [`MOSAIC_MIN_SIDE`] are dropped.
pub fn mosaic(scenes: [&Scene; 4], out_size: usize) -> Scene {
    let (h, w) = scenes[0].size();
    assert!(scenes.iter().all(|s| s.size() == (h, w)), "mosaic inputs must share a size");
    let c = scenes[0].image.shape()[0];
    let mut big = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let mut annotations = Vec::new();
    let (sy, sx) = (out_size as f32 / (2 * h) as f32, out_size as f32 / (2 * w) as f32);
    for (q, s) in scenes.iter().enumerate() {
        let (oy, ox) = ((q / 2) * h, (q % 2) * w);
        for ch in 0..c {
            for y in 0..h {
                let src = &s.image.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = ((ch * 2 * h) + oy + y) * 2 * w + ox;
                big.data_mut()[dst..dst + w].copy_from_slice(src);
            }
        }
        for g in &s.annotations {
            let b = BBox::new(
                (g.bbox.x1 + ox as f32) * sx,
                (g.bbox.y1 + oy as f32) * sy,
                (g.bbox.x2 + ox as f32) * sx,
                (g.bbox.y2 + oy as f32) * sy,
            );
            if b.width() >= MOSAIC_MIN_SIDE && b.height() >= MOSAIC_MIN_SIDE {
                annotations.push(GroundTruth { bbox: b, class_id: g.class_id });
            }
        }
    }
    Scene {
        id: format!("mosaic({},{},{},{})", scenes[0].id, scenes[1].id, scenes[2].id, scenes[3].id),
        image: resize(&big, out_size, out_size),
        annotations,
    }
}
