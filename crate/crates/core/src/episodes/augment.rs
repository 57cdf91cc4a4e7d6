//! Geometric training augmentation: horizontal flip, rotation, random crop.
//!
//! Image and mask always receive the same transform. Images are resampled
//! bilinearly, masks by nearest neighbour so they stay binary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Rotation angle is drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Side of the square output crop; `None` keeps the input size.
    pub crop: Option<usize>,
    /// Redraws allowed when a transform empties the mask.
    pub max_retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            crop: None,
            max_retries: 8,
        }
    }
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    let (h, w) = s.hw();
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        s.image.at(c, y, w - 1 - x)
    });
    let mask = Mask::from_fn(h, w, |y, x| s.mask.get(y, w - 1 - x));
    Sample {
        image,
        mask,
        class_id: s.class_id,
    }
}

/// Rotate about the image centre; uncovered pixels become 0 in both image and mask.
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    if degrees == 0.0 {
        return s.clone();
    }
    let (h, w) = s.hw();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Inverse map: source coordinate of each destination pixel.
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    };
    let mut image = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
                continue;
            }
            let (sy, sx) = (sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..3 {
                let v = (1.0 - fy) * ((1.0 - fx) * s.image.at(c, y0, x0) + fx * s.image.at(c, y0, x1))
                    + fy * ((1.0 - fx) * s.image.at(c, y1, x0) + fx * s.image.at(c, y1, x1));
                image.data_mut()[c * plane + y * w + x] = v;
            }
        }
    }
    let mask = Mask::from_fn(h, w, |y, x| {
        let (sy, sx) = source(y, x);
        let (ny, nx) = (sy.round(), sx.round());
        ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 && s.mask.get(ny as usize, nx as usize)
    });
    Sample {
        image,
        mask,
        class_id: s.class_id,
    }
}

pub fn crop(s: &Sample, top: usize, left: usize, size: usize) -> Result<Sample> {
    let (h, w) = s.hw();
    if size > h || size > w || top + size > h || left + size > w {
        return Err(Error::CropTooLarge { crop: size, h, w });
    }
    let image = Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        s.image.at(c, top + y, left + x)
    });
    let mask = Mask::from_fn(size, size, |y, x| s.mask.get(top + y, left + x));
    Ok(Sample {
        image,
        mask,
        class_id: s.class_id,
    })
}

fn draw(s: &Sample, cfg: &AugmentConfig, size: usize, rng: &mut impl Rng) -> Result<Sample> {
    let mut out = if rng.gen::<f64>() < cfg.flip_prob {
        flip_horizontal(s)
    } else {
        s.clone()
    };
    if cfg.max_rotation_deg > 0.0 {
        let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        out = rotate(&out, angle);
    }
    let (h, w) = out.hw();
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    crop(&out, top, left, size)
}

/// Random flip, rotation and crop. The output mask always has foreground:
/// transforms that empty it are redrawn, and after `max_retries` failures the
/// sample is returned untransformed apart from a crop centred on its mask.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = s.hw();
    let size = cfg.crop.unwrap_or(h.min(w));
    if size > h || size > w {
        return Err(Error::CropTooLarge { crop: size, h, w });
    }
    for _ in 0..=cfg.max_retries {
        let out = draw(s, cfg, size, rng)?;
        if out.mask.foreground() > 0 {
            return Ok(out);
        }
    }
    let (mut sy, mut sx, mut n) = (0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if s.mask.get(y, x) {
                sy += y;
                sx += x;
                n += 1;
            }
        }
    }
    let (cy, cx) = (sy / n.max(1), sx / n.max(1));
    let top = cy.saturating_sub(size / 2).min(h - size);
    let left = cx.saturating_sub(size / 2).min(w - size);
    crop(s, top, left, size)
}
