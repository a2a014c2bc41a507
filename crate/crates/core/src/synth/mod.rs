//! Procedural shape scenes with a parametric domain shift.
//!
//! Three classes (disc, square, triangle) are rendered with anti-aliasing
//! over a smooth textured background. The target domain differs from the
//! source only through its [`Shift`]; fog is the default shift.

mod io;

pub use io::{read_dataset, read_split, write_dataset, write_splits, BenchmarkManifest, DataError, SplitManifest, SPLITS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, GroundTruth};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["disc", "square", "triangle"];

/// An image (`[3,H,W]`, values in `[0,1]`) with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: Tensor<f32>,
    pub annotations: Vec<GroundTruth>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shift {
    None,
    Fog { strength: f32, haze: [f32; 3] },
    Color { cast: [f32; 3] },
    Scale { factor: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Range of the per-scene background base intensity.
    pub background: (f32, f32),
    /// Amplitude of the smooth background texture.
    pub noise_scale: f32,
    /// Amplitude of per-pixel noise.
    pub pixel_noise: f32,
    pub object_count: (usize, usize),
    /// Shape side / diameter range in pixels.
    pub object_size: (f32, f32),
    /// Minimum luminance difference between a shape and the background.
    pub min_contrast: f32,
    /// Largest IoU a new shape may have with an already placed one.
    pub max_overlap: f32,
    pub shift: Shift,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            background: (0.2, 0.8),
            noise_scale: 0.12,
            pixel_noise: 0.03,
            object_count: (2, 8),
            object_size: (12.0, 36.0),
            min_contrast: 0.25,
            max_overlap: 0.15,
            shift: Shift::None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid domain spec: {0}")]
pub struct SpecError(pub String);

impl DomainSpec {
    pub fn validate(&self, image_size: usize) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError(m.to_string()));
        let (lo, hi) = self.background;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return bad("background range must satisfy 0 <= lo <= hi <= 1");
        }
        if self.object_count.0 > self.object_count.1 {
            return bad("object_count min exceeds max");
        }
        let (smin, smax) = self.object_size;
        if !(smin >= 2.0 && smin <= smax && smax * self.scale_factor() <= image_size as f32) {
            return bad("object_size must satisfy 2 <= min <= max <= image size");
        }
        if !(self.noise_scale >= 0.0 && self.pixel_noise >= 0.0 && self.min_contrast >= 0.0) {
            return bad("noise and contrast parameters must be non-negative");
        }
        match self.shift {
            Shift::Fog { strength, haze } if !(0.0..=1.0).contains(&strength) || haze.iter().any(|h| !(0.0..=1.0).contains(h)) => {
                bad("fog strength and haze colour must lie in [0,1]")
            }
            Shift::Scale { factor } if !(factor > 0.0) => bad("scale factor must be positive"),
            _ => Ok(()),
        }
    }

    fn scale_factor(&self) -> f32 {
        match self.shift {
            Shift::Scale { factor } => factor,
            _ => 1.0,
        }
    }
}

/// Full benchmark description: image size, both domains and split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub image_size: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

/// Fog strength of the default target domain.
pub const DEFAULT_FOG: f32 = 0.7;

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            source: DomainSpec::default(),
            target: DomainSpec {
                shift: Shift::Fog {
                    strength: DEFAULT_FOG,
                    haze: [0.8, 0.8, 0.8],
                },
                ..DomainSpec::default()
            },
            source_train: 500,
            source_test: 200,
            target_train: 500,
            target_test: 200,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.image_size < 8 {
            return Err(SpecError("image_size must be at least 8".into()));
        }
        self.source.validate(self.image_size)?;
        self.target.validate(self.image_size)
    }

    /// `(split name, domain, count)` in generation order.
    pub fn splits(&self) -> [(&'static str, &DomainSpec, usize); 4] {
        [
            (SPLITS[0], &self.source, self.source_train),
            (SPLITS[1], &self.source, self.source_test),
            (SPLITS[2], &self.target, self.target_train),
            (SPLITS[3], &self.target, self.target_test),
        ]
    }

    /// Scenes of one split; scene `i` depends only on `(seed, split, i)`.
    pub fn generate_split(&self, split: usize, seed: u64) -> Vec<Scene> {
        let (name, domain, count) = self.splits()[split];
        (0..count)
            .map(|i| {
                let mut rng = derive_rng(seed, &[0x5CE4E, split as u64, i as u64]);
                let mut s = generate_scene(domain, self.image_size, &mut rng);
                s.id = format!("{name}_{i:05}");
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    fn from_class(c: usize) -> Self {
        [Shape::Disc, Shape::Square, Shape::Triangle][c]
    }

    /// Point-in-shape for a shape of side/diameter `s` centred at `(cx, cy)`.
    fn contains(self, cx: f32, cy: f32, s: f32, x: f32, y: f32) -> bool {
        let (dx, dy, h) = (x - cx, y - cy, 0.5 * s);
        match self {
            Shape::Disc => dx * dx + dy * dy <= h * h,
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            // Apex at the top, base at the bottom.
            Shape::Triangle => dy.abs() <= h && dx.abs() <= 0.5 * (dy + h),
        }
    }
}

const SUPERSAMPLE: usize = 4;

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn smooth_texture(size: usize, grid: usize, rng: &mut impl Rng) -> Vec<f32> {
    let knots: Vec<f32> = (0..grid * grid).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut out = vec![0.0; size * size];
    let scale = (grid - 1) as f32 / (size - 1) as f32;
    for y in 0..size {
        let gy = y as f32 * scale;
        let y0 = (gy.floor() as usize).min(grid - 2);
        let fy = gy - y0 as f32;
        for x in 0..size {
            let gx = x as f32 * scale;
            let x0 = (gx.floor() as usize).min(grid - 2);
            let fx = gx - x0 as f32;
            let k = |yy: usize, xx: usize| knots[yy * grid + xx];
            let top = k(y0, x0) * (1.0 - fx) + k(y0, x0 + 1) * fx;
            let bot = k(y0 + 1, x0) * (1.0 - fx) + k(y0 + 1, x0 + 1) * fx;
            out[y * size + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Renders one scene. Shapes lie fully inside the image; overlapping
/// placements are re-drawn a bounded number of times and then skipped.
/// Pixel values are quantized to 8-bit levels so the scene survives a
/// PPM round trip exactly.
pub fn generate_scene(spec: &DomainSpec, size: usize, rng: &mut impl Rng) -> Scene {
    let plane = size * size;
    let base: f32 = rng.gen_range(spec.background.0..=spec.background.1);
    let tint: [f32; 3] = [0; 3].map(|_| rng.gen_range(-0.08f32..0.08));
    let texture = smooth_texture(size, 7, rng);
    let mut img = vec![0.0f32; 3 * plane];
    for (i, t) in texture.iter().enumerate() {
        let n = rng.gen_range(-1.0f32..1.0) * spec.pixel_noise;
        for c in 0..3 {
            img[c * plane + i] = base + tint[c] + spec.noise_scale * t + n;
        }
    }

    let count = rng.gen_range(spec.object_count.0..=spec.object_count.1);
    let scale = spec.scale_factor();
    let mut annotations: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(0..NUM_CLASSES);
        let mut placed = None;
        for _ in 0..20 {
            let s = rng.gen_range(spec.object_size.0..=spec.object_size.1) * scale;
            let h = 0.5 * s;
            let cx = rng.gen_range(h..=size as f32 - h);
            let cy = rng.gen_range(h..=size as f32 - h);
            let bbox = BBox::new(cx - h, cy - h, cx + h, cy + h);
            if annotations.iter().all(|g| iou(&g.bbox, &bbox) <= spec.max_overlap) {
                placed = Some((cx, cy, s, bbox));
                break;
            }
        }
        let Some((cx, cy, s, bbox)) = placed else { continue };
        let bg = luminance([0, 1, 2].map(|c| img[c * plane + (cy as usize).min(size - 1) * size + (cx as usize).min(size - 1)]));
        let mut color = [0.0f32; 3];
        for _ in 0..50 {
            color = [0; 3].map(|_| rng.gen_range(0.0f32..=1.0));
            if (luminance(color) - bg).abs() >= spec.min_contrast {
                break;
            }
        }
        rasterize(&mut img, size, Shape::from_class(class_id), cx, cy, s, color);
        annotations.push(GroundTruth { bbox, class_id });
    }

    let mut image = Tensor::from_vec(&[3, size, size], img).expect("scene buffer");
    match spec.shift {
        Shift::Fog { strength, haze } => apply_fog(&mut image, strength, haze),
        Shift::Color { cast } => {
            for c in 0..3 {
                image.data_mut()[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += cast[c]);
            }
        }
        Shift::None | Shift::Scale { .. } => {}
    }
    quantize(&mut image);
    Scene {
        id: String::new(),
        image,
        annotations,
    }
}

/// Blends a supersampled shape of side/diameter `s` into a planar RGB buffer.
fn rasterize(img: &mut [f32], size: usize, shape: Shape, cx: f32, cy: f32, s: f32, color: [f32; 3]) {
    let plane = size * size;
    let h = 0.5 * s;
    let (x0, x1) = ((cx - h).floor().max(0.0) as usize, ((cx + h).ceil() as usize).min(size));
    let (y0, y1) = ((cy - h).floor().max(0.0) as usize, ((cy + h).ceil() as usize).min(size));
    let step = 1.0 / SUPERSAMPLE as f32;
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let (x, y) = (px as f32 + (sx as f32 + 0.5) * step, py as f32 + (sy as f32 + 0.5) * step);
                    hits += shape.contains(cx, cy, s, x, y) as usize;
                }
            }
            if hits > 0 {
                let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for c in 0..3 {
                    let v = &mut img[c * plane + py * size + px];
                    *v = (1.0 - cov) * *v + cov * color[c];
                }
            }
        }
    }
}

/// Clamps to `[0,1]` and rounds to the nearest 8-bit level.
pub fn quantize(image: &mut Tensor<f32>) {
    image.data_mut().iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// Smallest depth proxy (bottom row); the top row has depth 1.
const FOG_MIN_DEPTH: f32 = 0.4;
/// Blur sigma in pixels at full fog strength.
const FOG_MAX_BLUR: f32 = 1.5;

/// Depth-dependent haze: `(1−t)·haze + t·blur(image)` with
/// `t = 1 − strength·depth(y)` and depth growing towards the top row.
pub fn apply_fog(image: &mut Tensor<f32>, strength: f32, haze: [f32; 3]) {
    if strength <= 0.0 {
        return;
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    gaussian_blur(image, strength * FOG_MAX_BLUR);
    for c in 0..3 {
        for y in 0..h {
            let depth = FOG_MIN_DEPTH + (1.0 - FOG_MIN_DEPTH) * (1.0 - y as f32 / (h.max(2) - 1) as f32);
            let t = 1.0 - strength * depth;
            let row = &mut image.data_mut()[(c * h + y) * w..(c * h + y + 1) * w];
            row.iter_mut().for_each(|v| *v = (1.0 - t) * haze[c] + t * *v);
        }
    }
}

/// Separable Gaussian blur of every channel of a `[C,H,W]` image, with
/// edge clamping. `sigma <= 0` is a no-op.
pub fn gaussian_blur(image: &mut Tensor<f32>, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        let plane = &mut image.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, i) in kernel.iter().zip(-radius..=radius) {
                    let xx = (x as isize + i).clamp(0, w as isize - 1) as usize;
                    acc += k * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, i) in kernel.iter().zip(-radius..=radius) {
                    let yy = (y as isize + i).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}
