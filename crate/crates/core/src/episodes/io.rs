//! On-disk dataset layout and split files.
//!
//! Dataset layout:
//!
//! ```text
//! <root>/<class_id>/<sample_id>.img    RGB PNG
//! <root>/<class_id>/<sample_id>.mask   8-bit grayscale PNG, 0 = background, 255 = foreground
//! ```
//!
//! Sample ids are zero-padded decimal (`0000.img`). Files are PNG-encoded
//! regardless of extension. On load, mask values of 128 or above count as
//! foreground.
//!
//! Split files list the test classes of each split, one class id per line,
//! each group introduced by a `# split <index>` header:
//!
//! ```text
//! # split 0
//! 0
//! 1
//! 2
//! # split 1
//! 3
//! ...
//! ```
//!
//! A split's training classes are all classes not listed in its group.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};

use super::{Dataset, Mask, Sample, SplitPlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("RGB export needs 3 channels, got {c}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|ch| to_u8(image.at(ch, y, x))))
    }))
}

pub fn rgb_to_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_sample(s: &Sample, dir: &Path, sample_id: usize) -> Result<()> {
    save_png(&image_to_rgb(&s.image)?, &dir.join(format!("{sample_id:04}.img")))?;
    let (h, w) = s.hw();
    let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if s.mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    save_png(&mask, &dir.join(format!("{sample_id:04}.mask")))
}

fn load_raster(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_sample(img_path: &Path, mask_path: &Path, class_id: u32) -> Result<Sample> {
    let image = rgb_to_image(&load_raster(img_path)?.to_rgb8());
    let gray = load_raster(mask_path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mask = Mask::from_fn(h, w, |y, x| gray.get_pixel(x as u32, y as u32)[0] >= 128);
    Sample::new(image, mask, class_id).map_err(|e| Error::Format {
        path: mask_path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Write a dataset under `root`; samples are numbered per class in dataset order.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for class_id in ds.class_ids() {
        let dir = root.join(class_id.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (sid, &i) in ds.indices_of(class_id).iter().enumerate() {
            save_sample(ds.sample(i), &dir, sid)?;
            written.push(dir.join(format!("{sid:04}.img")));
        }
    }
    Ok(written)
}

/// Load every `<class_id>/<sample_id>.img` with a matching `.mask`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut classes: Vec<(u32, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if let Some(id) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<u32>().ok())
        {
            if path.is_dir() {
                classes.push((id, path));
            }
        }
    }
    classes.sort();
    let mut samples = Vec::new();
    for (class_id, dir) in classes {
        let mut imgs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "img"))
            .collect();
        imgs.sort();
        for img in imgs {
            let mask = img.with_extension("mask");
            samples.push(load_sample(&img, &mask, class_id)?);
        }
    }
    if samples.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            reason: "no samples found".into(),
        });
    }
    Ok(Dataset::from_samples(samples))
}

pub fn format_splits(plans: &[SplitPlan]) -> String {
    let mut out = String::new();
    for p in plans {
        out.push_str(&format!("# split {}\n", p.split_index));
        for c in &p.test_classes {
            out.push_str(&format!("{c}\n"));
        }
    }
    out
}

pub fn parse_splits(text: &str, path: &Path) -> Result<Vec<SplitPlan>> {
    let bad = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut groups: Vec<(usize, BTreeSet<u32>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# split") {
            let idx = rest
                .trim()
                .parse()
                .map_err(|_| bad(n + 1, format!("bad split header {line:?}")))?;
            groups.push((idx, BTreeSet::new()));
        } else {
            let id: u32 = line
                .parse()
                .map_err(|_| bad(n + 1, format!("bad class id {line:?}")))?;
            let Some((_, set)) = groups.last_mut() else {
                return Err(bad(n + 1, "class id before any split header".into()));
            };
            set.insert(id);
        }
    }
    let all: BTreeSet<u32> = groups.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let total: usize = groups.iter().map(|(_, s)| s.len()).sum();
    if total != all.len() {
        return Err(bad(0, "a class appears in more than one split".into()));
    }
    Ok(groups
        .into_iter()
        .map(|(split_index, test)| SplitPlan {
            split_index,
            train_classes: all.difference(&test).copied().collect(),
            test_classes: test,
        })
        .collect())
}

pub fn write_splits(plans: &[SplitPlan], path: &Path) -> Result<()> {
    fs::write(path, format_splits(plans)).map_err(|e| Error::io(path, e))
}

pub fn read_splits(path: &Path) -> Result<Vec<SplitPlan>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_splits(&text, path)
}
