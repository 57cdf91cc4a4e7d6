//! Synthetic few-shot segmentation data.
//!
//! Every class is a shape family drawn in a flat canonical colour. Colours
//! come from a six-entry palette, so classes `c` and `c + 6` share a colour
//! and differ only in shape. Backgrounds carry random stripe or checker
//! textures, and about half of the images also contain a distractor object
//! of another class that is not part of the mask.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Mask, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Canonical foreground colours as 8-bit RGB, so they survive PNG round trips.
pub const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [240, 210, 30],
    [200, 50, 210],
    [30, 210, 220],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
    /// Set from the experiment's root seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Probability that an image also contains an object of another class.
    pub distractor_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 12,
            image_size: 48,
            samples_per_class: 24,
            noise_level: 0.03,
            seed: 0,
            distractor_prob: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 4 {
            return Err(Error::config("synth.n_classes", "must be at least 4"));
        }
        if self.image_size < 32 {
            return Err(Error::config("synth.image_size", "must be at least 32"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config("synth.samples_per_class", "must be at least 2"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("synth.noise_level", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::config("synth.distractor_prob", "must be in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeFamily {
    Polygon(usize),
    Star(usize),
    Disc,
    Ring,
    Crescent,
    Cross,
    Ellipse,
}

const FAMILIES: [ShapeFamily; 12] = [
    ShapeFamily::Polygon(3),
    ShapeFamily::Polygon(4),
    ShapeFamily::Disc,
    ShapeFamily::Star(5),
    ShapeFamily::Ring,
    ShapeFamily::Cross,
    ShapeFamily::Polygon(6),
    ShapeFamily::Crescent,
    ShapeFamily::Ellipse,
    ShapeFamily::Star(4),
    ShapeFamily::Polygon(5),
    ShapeFamily::Star(7),
];

impl ShapeFamily {
    pub fn of_class(class_id: u32) -> Self {
        FAMILIES[class_id as usize % FAMILIES.len()]
    }

    /// Whether object-frame point `(u, v)` (unit radius) lies inside the shape.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r = u.hypot(v);
        let theta = v.atan2(u);
        match self {
            ShapeFamily::Polygon(n) => {
                let sector = 2.0 * PI / n as f64;
                let phi = (theta + PI / 2.0).rem_euclid(sector) - sector / 2.0;
                r * phi.cos() <= (sector / 2.0).cos()
            }
            ShapeFamily::Star(n) => {
                let sector = 2.0 * PI / n as f64;
                let phi = ((theta + PI / 2.0).rem_euclid(sector) - sector / 2.0).abs() / (sector / 2.0);
                // Radius falls linearly from the tip (phi=0) to the notch (phi=1).
                r <= 1.0 - 0.55 * phi
            }
            ShapeFamily::Disc => r <= 1.0,
            ShapeFamily::Ring => (0.55..=1.0).contains(&r),
            ShapeFamily::Crescent => r <= 1.0 && (u - 0.5).hypot(v) > 0.8,
            ShapeFamily::Cross => u.abs().max(v.abs()) <= 0.95 && u.abs().min(v.abs()) <= 0.32,
            ShapeFamily::Ellipse => (u / 1.0).powi(2) + (v / 0.5).powi(2) <= 1.0,
        }
    }
}

pub fn class_color(class_id: u32) -> [f64; 3] {
    let c = PALETTE[class_id as usize % PALETTE.len()];
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
}

struct Placement {
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
}

impl Placement {
    fn random(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let radius = rng.gen_range(0.16..0.3) * s;
        let margin = radius + 1.0;
        Self {
            cy: rng.gen_range(margin..s - margin),
            cx: rng.gen_range(margin..s - margin),
            radius,
            angle: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn covers(&self, family: ShapeFamily, y: usize, x: usize) -> bool {
        let (dy, dx) = ((y as f64 + 0.5 - self.cy), (x as f64 + 0.5 - self.cx));
        let (sin, cos) = self.angle.sin_cos();
        let u = (cos * dx + sin * dy) / self.radius;
        let v = (-sin * dx + cos * dy) / self.radius;
        family.contains(u, v)
    }
}

fn background(size: usize, rng: &mut impl Rng) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let amp = rng.gen_range(0.04..0.12);
    let period = rng.gen_range(3.0..9.0);
    let angle: f64 = rng.gen_range(0.0..PI);
    let checker = rng.gen_bool(0.5);
    let (sin, cos) = angle.sin_cos();
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / (size * size), ((i / size) % size) as f64, (i % size) as f64);
        let a = (cos * x + sin * y) / period;
        let pattern = if checker {
            let b = (-sin * x + cos * y) / period;
            if (a.floor() as i64 + b.floor() as i64) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        } else {
            (2.0 * PI * a).sin()
        };
        base[c] + amp * pattern
    })
}

fn render_sample(cfg: &SynthConfig, class_id: u32, index: usize) -> Sample {
    let mut r = rng::stream(cfg.seed, &[tag::DATA, class_id as u64, index as u64]);
    let size = cfg.image_size;
    let mut image = background(size, &mut r);
    let plane = size * size;
    let paint = |image: &mut Tensor, cls: u32, place: &Placement| {
        let family = ShapeFamily::of_class(cls);
        let color = class_color(cls);
        for y in 0..size {
            for x in 0..size {
                if place.covers(family, y, x) {
                    for (c, col) in color.iter().enumerate() {
                        image.data_mut()[c * plane + y * size + x] = *col;
                    }
                }
            }
        }
    };
    if cfg.n_classes > 1 && r.gen_bool(cfg.distractor_prob) {
        let other = (class_id + r.gen_range(1..cfg.n_classes as u32)) % cfg.n_classes as u32;
        let place = Placement::random(size, &mut r);
        paint(&mut image, other, &place);
    }
    // Redraw placements until the rasterised target is non-trivial.
    let family = ShapeFamily::of_class(class_id);
    let (place, mask) = loop {
        let place = Placement::random(size, &mut r);
        let mask = Mask::from_fn(size, size, |y, x| place.covers(family, y, x));
        if mask.foreground() >= 4 {
            break (place, mask);
        }
    };
    paint(&mut image, class_id, &place);
    if cfg.noise_level > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_level).expect("finite std");
        for v in image.data_mut() {
            *v += normal.sample(&mut r);
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Sample {
        image,
        mask,
        class_id,
    }
}

/// Build the full dataset. Each sample depends only on `(seed, class, index)`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.n_classes as u32)
        .flat_map(|c| (0..cfg.samples_per_class).map(move |i| (c, i)))
        .map(|(c, i)| render_sample(cfg, c, i))
        .collect();
    Ok(Dataset::from_samples(samples))
}
