//! Procedural segmentation scenes: anti-aliased shapes over a textured
//! background. Labels come from the rasterizer's pixel-center test; image
//! colors use 4×4 supersampled coverage.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::numerics::{seeded, Rng64};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
    /// A 2-pixel-wide bent stroke.
    Curve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub size: usize,
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Shape of classes `1..classes`.
    pub kinds: Vec<ShapeKind>,
    /// Base color per class; entry 0 tints the background.
    pub palette: Vec<[f64; 3]>,
    /// Background texture family: 0 = oriented stripes, 1 = smooth blobs.
    pub texture: u32,
    pub color_jitter: f64,
    pub noise: f64,
    pub train: usize,
    pub val: usize,
}

const PALETTE: [[f64; 3]; 5] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.30, 0.25],
    [0.25, 0.70, 0.35],
    [0.30, 0.40, 0.85],
    [0.85, 0.75, 0.25],
];

impl Default for SynthSpec {
    /// The downstream task: 64×64, background plus four shape classes.
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            size: 64,
            classes: 5,
            shapes_min: 3,
            shapes_max: 6,
            kinds: vec![ShapeKind::Disk, ShapeKind::Rect, ShapeKind::Triangle, ShapeKind::Curve],
            palette: PALETTE.to_vec(),
            texture: 0,
            color_jitter: 0.2,
            noise: 0.06,
            train: 256,
            val: 64,
        }
    }
}

impl SynthSpec {
    /// Source domain for pretraining: same shape vocabulary, permuted
    /// class colors and a different background family.
    pub fn source() -> Self {
        let p = PALETTE;
        SynthSpec {
            seed: 1_000,
            palette: vec![[0.55, 0.50, 0.45], p[3], p[4], p[1], p[2]],
            texture: 1,
            train: 512,
            val: 64,
            ..Self::default()
        }
    }

    /// Thin-structure task: background plus one vessel-like curve class.
    pub fn vessels() -> Self {
        SynthSpec {
            seed: 7,
            classes: 2,
            shapes_min: 3,
            shapes_max: 6,
            kinds: vec![ShapeKind::Curve],
            palette: vec![[0.55, 0.30, 0.25], [0.85, 0.55, 0.45]],
            texture: 1,
            color_jitter: 0.08,
            noise: 0.08,
            // the one-shot protocol draws from all samples; the split only matters to plain training
            train: 4,
            val: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        if self.size < 16 {
            return Err(Error::config("data.size", "images must be at least 16 pixels"));
        }
        if self.kinds.len() != self.classes - 1 {
            return Err(Error::config("data.kinds", "need one shape kind per foreground class"));
        }
        if self.palette.len() != self.classes {
            return Err(Error::config("data.palette", "need one color per class"));
        }
        if self.shapes_max == 0 || self.shapes_min > self.shapes_max {
            return Err(Error::config("data.shapes", "shape count range is empty"));
        }
        if self.train + self.val == 0 {
            return Err(Error::config("data.train", "dataset would be empty"));
        }
        if self.texture > 1 {
            return Err(Error::config("data.texture", "unknown texture family"));
        }
        Ok(())
    }
}

enum Geometry {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, a: f64, b: f64, cos: f64, sin: f64 },
    Triangle { v: [(f64, f64); 3] },
    Curve { points: Vec<(f64, f64)>, half_width: f64 },
}

impl Geometry {
    fn random(kind: ShapeKind, size: f64, rng: &mut Rng64) -> Self {
        let scale = size / 64.0;
        let margin = 6.0 * scale;
        let mut center = || (rng.gen_range(margin..size - margin), rng.gen_range(margin..size - margin));
        match kind {
            ShapeKind::Disk => {
                let (cx, cy) = center();
                Geometry::Disk { cx, cy, r: rng.gen_range(4.0..9.0) * scale }
            }
            ShapeKind::Rect => {
                let (cx, cy) = center();
                let theta: f64 = rng.gen_range(0.0..PI);
                Geometry::Rect {
                    cx,
                    cy,
                    a: rng.gen_range(3.0..9.0) * scale,
                    b: rng.gen_range(3.0..9.0) * scale,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            }
            ShapeKind::Triangle => {
                let (cx, cy) = center();
                let r = rng.gen_range(6.0..11.0) * scale;
                let t0: f64 = rng.gen_range(0.0..2.0 * PI);
                let mut v = [(0.0, 0.0); 3];
                for (i, p) in v.iter_mut().enumerate() {
                    let t = t0 + 2.0 * PI * i as f64 / 3.0 + rng.gen_range(-0.3..0.3);
                    *p = (cx + r * t.cos(), cy + r * t.sin());
                }
                Geometry::Triangle { v }
            }
            ShapeKind::Curve => {
                let mut pt = || (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
                let (p0, p1, p2) = (pt(), pt(), pt());
                let points = (0..=24)
                    .map(|i| {
                        let t = i as f64 / 24.0;
                        let u = 1.0 - t;
                        (
                            u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                            u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
                        )
                    })
                    .collect();
                Geometry::Curve { points, half_width: 1.0 }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Geometry::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Rect { cx, cy, a, b, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= *a && (-dx * sin + dy * cos).abs() <= *b
            }
            Geometry::Triangle { v } => {
                let edge = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Geometry::Curve { points, half_width } => points.windows(2).any(|s| {
                let (a, b) = (s[0], s[1]);
                let (ex, ey) = (b.0 - a.0, b.1 - a.1);
                let len2 = ex * ex + ey * ey;
                let t = if len2 > 0.0 { (((x - a.0) * ex + (y - a.1) * ey) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (px, py) = (a.0 + t * ex - x, a.1 + t * ey - y);
                px * px + py * py <= half_width * half_width
            }),
        }
    }

    /// Pixel bounding box `(x0, y0, x1, y1)`, exclusive upper bounds, clipped.
    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
        let mut grow = |x: f64, y: f64, pad: f64| {
            lo = (lo.0.min(x - pad), lo.1.min(y - pad));
            hi = (hi.0.max(x + pad), hi.1.max(y + pad));
        };
        match self {
            Geometry::Disk { cx, cy, r } => grow(*cx, *cy, *r),
            Geometry::Rect { cx, cy, a, b, .. } => grow(*cx, *cy, a.hypot(*b)),
            Geometry::Triangle { v } => v.iter().for_each(|p| grow(p.0, p.1, 0.0)),
            Geometry::Curve { points, half_width } => points.iter().for_each(|p| grow(p.0, p.1, *half_width)),
        }
        let clip = |v: f64| (v.floor().max(0.0) as usize).min(size);
        (clip(lo.0 - 1.0), clip(lo.1 - 1.0), clip(hi.0 + 2.0), clip(hi.1 + 2.0))
    }
}

fn background(spec: &SynthSpec, rng: &mut Rng64) -> Vec<f64> {
    let s = spec.size;
    let tint = spec.palette[0];
    let mut field = vec![0.0; s * s];
    match spec.texture {
        0 => {
            let phi: f64 = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(2.0..6.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (i, f) in field.iter_mut().enumerate() {
                let (x, y) = ((i % s) as f64, (i / s) as f64);
                let t = (x * phi.cos() + y * phi.sin()) / s as f64;
                *f = 0.5 + 0.5 * (2.0 * PI * freq * t + phase).sin();
            }
        }
        _ => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..5)
                .map(|_| {
                    (
                        rng.gen_range(0.0..s as f64),
                        rng.gen_range(0.0..s as f64),
                        rng.gen_range(0.1..0.25) * s as f64,
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            for (i, f) in field.iter_mut().enumerate() {
                let (x, y) = ((i % s) as f64, (i / s) as f64);
                let v: f64 = blobs
                    .iter()
                    .map(|(cx, cy, sd, amp)| amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sd * sd)).exp())
                    .sum();
                *f = (0.5 + 0.5 * v).clamp(0.0, 1.0);
            }
        }
    }
    let mut img = vec![0.0; 3 * s * s];
    for ch in 0..3 {
        for (i, f) in field.iter().enumerate() {
            img[ch * s * s + i] = tint[ch] * (0.6 + 0.8 * f);
        }
    }
    img
}

fn render(spec: &SynthSpec, index: usize) -> Result<Sample> {
    let mut rng = seeded(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.size;
    let plane = s * s;
    let mut img = background(spec, &mut rng);
    let mut labels = vec![0u32; plane];
    let count = rng.gen_range(spec.shapes_min..=spec.shapes_max);
    const SUB: usize = 4;
    for _ in 0..count {
        let class = rng.gen_range(1..spec.classes);
        let geom = Geometry::random(spec.kinds[class - 1], s as f64, &mut rng);
        let base = spec.palette[class];
        let color: Vec<f64> = base
            .iter()
            .map(|c| (c + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0))
            .collect();
        let (x0, y0, x1, y1) = geom.bounds(s);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let x = px as f64 + (sx as f64 + 0.5) / SUB as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SUB as f64;
                        hits += geom.contains(x, y) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f64 / (SUB * SUB) as f64;
                let at = py * s + px;
                for (ch, c) in color.iter().enumerate() {
                    let v = &mut img[ch * plane + at];
                    *v = cov * c + (1.0 - cov) * *v;
                }
                if geom.contains(px as f64 + 0.5, py as f64 + 0.5) {
                    labels[at] = class as u32;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in img.iter_mut() {
            *v += rng.gen_range(-spec.noise..=spec.noise);
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![1, 3, s, s], img)?,
        label: LabelMap::new(1, s, s, spec.classes, None, labels)?,
    })
}

/// Renders `train + val` samples; each sample draws from its own stream of the seed.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.train + spec.val).map(|i| render(spec, i)).collect::<Result<_>>()?;
    Ok(Dataset { spec: spec.clone(), samples })
}
