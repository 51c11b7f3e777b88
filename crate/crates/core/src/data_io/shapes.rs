//! Synthetic shapes: classification images (one centred shape) and
//! detection images (1-4 separated shapes with exact masks).

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, seeded, Rng};
use crate::scalar::Real;
use crate::tensor_core::Tensor;

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classification,
    Detection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] =
        [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Cross];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    /// Base fill hue in degrees; each class owns a distinct colour family.
    fn hue(self) -> f64 {
        match self {
            ShapeClass::Circle => 0.0,
            ShapeClass::Square => 120.0,
            ShapeClass::Triangle => 230.0,
            ShapeClass::Cross => 55.0,
        }
    }

    /// Whether the point offset `(dx, dy)` from the centre lies inside a shape
    /// of half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeClass::Circle => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeClass::Triangle => {
                // apex up, base down
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            ShapeClass::Cross => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Row-major boolean pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        }
    }

    /// Alternating run lengths, starting with a (possibly empty) run of unset pixels.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Option<Mask> {
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        if total != (height * width) as u64 {
            return None;
        }
        let mut bits = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Some(Mask { height, width, bits })
    }

    /// Tight `(cx, cy, w, h)` box in `[0, 1]` image coordinates.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            return None;
        }
        let (w, h) = (self.width as f64, self.height as f64);
        Some([
            (x0 + x1) as f64 / (2.0 * w),
            (y0 + y1) as f64 / (2.0 * h),
            (x1 - x0) as f64 / w,
            (y1 - y0) as f64 / h,
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub class: usize,
    /// `(cx, cy, w, h)` in `[0, 1]`.
    pub bbox: [f64; 4],
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Label(usize),
    Objects(Vec<ObjectAnnotation>),
}

/// One image `[H x W x 3]` with values in `[0, 1]` plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: u64,
    pub image: Tensor<T>,
    pub annotation: Annotation,
}

impl<T: Real> Sample<T> {
    pub fn mode(&self) -> Mode {
        match self.annotation {
            Annotation::Label(_) => Mode::Classification,
            Annotation::Objects(_) => Mode::Detection,
        }
    }

    pub fn side(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn label(&self) -> Option<usize> {
        match self.annotation {
            Annotation::Label(c) => Some(c),
            Annotation::Objects(_) => None,
        }
    }

    pub fn objects(&self) -> &[ObjectAnnotation] {
        match &self.annotation {
            Annotation::Objects(o) => o,
            Annotation::Label(_) => &[],
        }
    }

    /// Union of all object masks; the whole image in classification mode.
    pub fn object_mask(&self) -> Mask {
        let s = self.side();
        match &self.annotation {
            Annotation::Label(_) => Mask::full(s, s),
            Annotation::Objects(o) => o.iter().fold(Mask::empty(s, s), |m, ob| m.union(&ob.mask)),
        }
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Placed {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

fn fill_color(class: ShapeClass, rng: &mut Rng) -> [f64; 3] {
    let h = class.hue() + rng.gen_range(-12.0..12.0);
    let s = rng.gen_range(0.65..0.95);
    let v = rng.gen_range(0.7..0.95);
    hsv_to_rgb(h, s, v)
}

/// Deterministic synthetic sample for `seed` with a `side x side` image.
pub fn generate_shapes_sample<T: Real>(seed: u64, mode: Mode, side: usize) -> Sample<T> {
    let mut rng = seeded(seed);
    let sf = side as f64;

    // Low-frequency muted background: a gradient between two colours plus a
    // gentle sinusoidal ripple.
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    let freq = rng.gen_range(0.5..1.5);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut placed: Vec<Placed> = Vec::new();
    match mode {
        Mode::Classification => {
            let class = ShapeClass::ALL[rng.gen_range(0..NUM_CLASSES)];
            let r = sf * rng.gen_range(0.22..0.32);
            let jitter = sf * 0.06;
            let cx = sf / 2.0 + rng.gen_range(-jitter..jitter);
            let cy = sf / 2.0 + rng.gen_range(-jitter..jitter);
            placed.push(Placed { class, cx, cy, r, color: fill_color(class, &mut rng) });
        }
        Mode::Detection => {
            let count = rng.gen_range(1..=4);
            let mut attempts = 0;
            while placed.len() < count && attempts < 500 {
                attempts += 1;
                let class = ShapeClass::ALL[rng.gen_range(0..NUM_CLASSES)];
                let r = sf * rng.gen_range(0.08..0.14);
                let margin = r + 1.0;
                let cx = rng.gen_range(margin..sf - margin);
                let cy = rng.gen_range(margin..sf - margin);
                let clear = placed.iter().all(|p| {
                    let gap = p.r + r + 2.0;
                    (p.cx - cx).abs() > gap || (p.cy - cy).abs() > gap
                });
                if clear {
                    placed.push(Placed { class, cx, cy, r, color: fill_color(class, &mut rng) });
                }
            }
        }
    }

    let mut img = vec![0.0f64; side * side * 3];
    let mut masks: Vec<Mask> = placed.iter().map(|_| Mask::empty(side, side)).collect();
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((px / sf - 0.5) * ux + (py / sf - 0.5) * uy + 0.5).clamp(0.0, 1.0);
            let ripple = 0.05 * (freq * std::f64::consts::TAU * (px / sf) + phase).sin();
            let mut rgb: [f64; 3] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t + ripple);
            for (k, p) in placed.iter().enumerate() {
                if p.class.contains(px - p.cx, py - p.cy, p.r) {
                    rgb = p.color;
                    masks[k].bits[y * side + x] = true;
                }
            }
            for c in 0..3 {
                let noise = rng.gen_range(-0.02..0.02);
                img[(y * side + x) * 3 + c] = quantize(rgb[c] + noise);
            }
        }
    }

    let annotation = match mode {
        Mode::Classification => Annotation::Label(placed[0].class.id()),
        Mode::Detection => Annotation::Objects(
            placed
                .iter()
                .zip(masks)
                .filter_map(|(p, mask)| {
                    mask.bbox().map(|bbox| ObjectAnnotation { class: p.class.id(), bbox, mask })
                })
                .collect(),
        ),
    };
    let image = Tensor::new([side, side, 3], img.into_iter().map(T::lit).collect()).expect("image size");
    Sample { id: seed, image, annotation }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 2000, val: 500, test: 500 }
    }
}

#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

/// Generates `count` samples of one split; a pure function of the arguments.
pub fn generate_split<T: Real>(master_seed: u64, split: &str, mode: Mode, side: usize, count: usize) -> Vec<Sample<T>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = generate_shapes_sample(derive_seed(master_seed, split, i), mode, side);
            s.id = i;
            s
        })
        .collect()
}

pub fn generate_splits<T: Real>(master_seed: u64, mode: Mode, side: usize, sizes: SplitSizes) -> Splits<T> {
    Splits {
        train: generate_split(master_seed, "train", mode, side, sizes.train),
        val: generate_split(master_seed, "val", mode, side, sizes.val),
        test: generate_split(master_seed, "test", mode, side, sizes.test),
    }
}

/// Per-pixel mean image of a split.
pub fn mean_image<T: Real>(samples: &[Sample<T>]) -> Option<Tensor<T>> {
    let first = samples.first()?;
    let mut acc = Tensor::zeros(first.image.shape().to_vec());
    for s in samples {
        acc.add_assign(&s.image);
    }
    acc.scale_assign(T::one() / T::lit(samples.len() as f64));
    Some(acc)
}
