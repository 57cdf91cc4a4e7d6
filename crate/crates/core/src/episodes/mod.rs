//! Samples, class splits and episodic sampling.
//!
//! An [`Episode`] is one few-shot task: `K` support pairs and one query pair,
//! all of the same class. Classes are partitioned into disjoint train/test
//! sets by [`make_splits`]; training episodes draw only from the train
//! classes and evaluation episodes only from the test classes.

mod augment;
pub mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

pub use augment::{augment, crop, flip_horizontal, rotate, AugmentConfig};
pub use synth::{generate_synthetic_dataset, ShapeFamily, SynthConfig, PALETTE};

use crate::error::{Error, Result};
use crate::tensor::{ResizeMode, Tensor};

/// Binary `h×w` segmentation mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask {h}×{w} needs {} cells, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Shape(format!("mask value {v} is not binary")));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w) as u8).collect();
        Self { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.h, self.w], self.to_f64()).expect("mask shape")
    }

    /// Soft occupancy on a coarser grid (area average, values in `[0,1]`).
    pub fn resize_area(&self, h: usize, w: usize) -> Vec<f64> {
        self.to_tensor()
            .resize(h, w, ResizeMode::Area)
            .expect("3-D")
            .into_data()
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        let t = self
            .to_tensor()
            .resize(h, w, ResizeMode::Nearest)
            .expect("3-D");
        Mask {
            h,
            w,
            data: t.data().iter().map(|&v| (v > 0.5) as u8).collect(),
        }
    }
}

/// One labelled image: `3×H×W` in `[0,1]` plus its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
    pub class_id: u32,
}

impl Sample {
    pub fn new(image: Tensor, mask: Mask, class_id: u32) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("image has {c} channels, expected 3")));
        }
        if (h, w) != (mask.h, mask.w) {
            return Err(Error::Shape(format!(
                "image {h}×{w} vs mask {}×{}",
                mask.h, mask.w
            )));
        }
        if mask.foreground() == 0 {
            return Err(Error::Empty("sample mask has no foreground"));
        }
        Ok(Self {
            image,
            mask,
            class_id,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.mask.h, self.mask.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_id: u32,
    pub support: Vec<Sample>,
    pub query: Sample,
    /// Dataset indices of the support samples, then the query.
    pub support_ids: Vec<usize>,
    pub query_id: usize,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// Same support and query, with the support list narrowed to the first `k`.
    pub fn with_shots(&self, k: usize) -> Episode {
        Episode {
            class_id: self.class_id,
            support: self.support[..k].to_vec(),
            query: self.query.clone(),
            support_ids: self.support_ids[..k].to_vec(),
            query_id: self.query_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitPlan {
    pub split_index: usize,
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
}

/// Partition `class_ids` into `n_splits` folds of consecutive classes; fold
/// `i` is the test set of plan `i` and the rest are its training classes.
pub fn make_splits(class_ids: &[u32], n_splits: usize) -> Result<Vec<SplitPlan>> {
    if n_splits == 0 || class_ids.len() % n_splits != 0 {
        return Err(Error::IndivisibleSplits {
            n_classes: class_ids.len(),
            n_splits,
        });
    }
    let fold = class_ids.len() / n_splits;
    Ok((0..n_splits)
        .map(|i| {
            let test: BTreeSet<u32> = class_ids[i * fold..(i + 1) * fold].iter().copied().collect();
            let train = class_ids
                .iter()
                .copied()
                .filter(|c| !test.contains(c))
                .collect();
            SplitPlan {
                split_index: i,
                train_classes: train,
                test_classes: test,
            }
        })
        .collect())
}

/// In-memory collection of samples indexed by class.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.class_id).or_default().push(i);
        }
        Self { samples, by_class }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn indices_of(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    /// The samples of `classes` only, in dataset order.
    pub fn restricted_to(&self, classes: &BTreeSet<u32>) -> Dataset {
        Dataset::from_samples(
            self.samples
                .iter()
                .filter(|s| classes.contains(&s.class_id))
                .cloned()
                .collect(),
        )
    }

    /// Indices of all samples whose class is in `classes`, in dataset order.
    pub fn indices_in(&self, classes: &BTreeSet<u32>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| classes.contains(&self.samples[i].class_id))
            .collect()
    }
}

/// Draw `k` distinct support samples and one further query sample of `class_id`.
pub fn sample_episode(
    dataset: &Dataset,
    class_id: u32,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::config("K", "must be at least 1"));
    }
    let pool = dataset.indices_of(class_id);
    if pool.len() < k + 1 {
        return Err(Error::InsufficientSamples {
            class_id,
            available: pool.len(),
            needed: k + 1,
        });
    }
    let picked: Vec<usize> = pool.choose_multiple(rng, k + 1).copied().collect();
    let (support_ids, query_id) = (picked[..k].to_vec(), picked[k]);
    Ok(Episode {
        class_id,
        support: support_ids.iter().map(|&i| dataset.sample(i).clone()).collect(),
        query: dataset.sample(query_id).clone(),
        support_ids,
        query_id,
    })
}

/// Uniformly pick a class from `classes`, then sample an episode of it.
pub fn sample_episode_from(
    dataset: &Dataset,
    classes: &[u32],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let &c = classes.choose(rng).ok_or(Error::Empty("no classes to sample from"))?;
    sample_episode(dataset, c, k, rng)
}
