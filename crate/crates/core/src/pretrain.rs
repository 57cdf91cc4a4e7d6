//! Classification pretraining of the backbone on a split's training classes.
//!
//! A linear head on globally pooled high-level features is trained with
//! cross-entropy together with the trunk. The head is dropped afterwards and
//! the trunk is frozen; the classes it saw are kept in the checkpoint so that
//! later runs can verify no test class leaked into pretraining.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::episodes::{flip_horizontal, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{poly_lr, Sgd};
use crate::params::ParamSet;
use crate::rng::{self, derive_seed, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Share of each class's images held out to score the classifier.
    pub holdout_fraction: f64,
    /// Random horizontal flips of training images.
    pub flip: bool,
    /// Set from the experiment's root seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            holdout_fraction: 0.2,
            flip: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("pretrain.epochs/batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("pretrain.momentum", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("pretrain.holdout_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub split_index: usize,
    pub seen_classes: BTreeSet<u32>,
    /// Top-1 accuracy on the held-out images of the seen classes.
    pub holdout_accuracy: f64,
    /// Accuracy of uniform guessing.
    pub chance: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Fails if any class seen in pretraining is a test class of `split`.
pub fn check_no_leakage(seen: &BTreeSet<u32>, split: &SplitPlan) -> Result<()> {
    match seen.intersection(&split.test_classes).next() {
        Some(&c) => Err(Error::ClassLeakage(c)),
        None => Ok(()),
    }
}

/// Pretrain a fresh backbone on `stream`, which must not contain any image
/// of a test class of `split`.
pub fn pretrain_backbone(
    stream: &Dataset,
    split: &SplitPlan,
    backbone_cfg: &BackboneConfig,
    cfg: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    cfg.validate()?;
    let seen: BTreeSet<u32> = stream.class_ids().into_iter().collect();
    check_no_leakage(&seen, split)?;
    if seen.len() < 2 {
        return Err(Error::Empty("pretraining needs at least two classes"));
    }
    let classes: Vec<u32> = seen.iter().copied().collect();

    let mut train_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for &c in &classes {
        let idx = stream.indices_of(c);
        let n_hold = ((idx.len() as f64 * cfg.holdout_fraction).round() as usize).min(idx.len() - 1);
        let (tr, ho) = idx.split_at(idx.len() - n_hold);
        train_idx.extend_from_slice(tr);
        hold_idx.extend_from_slice(ho);
    }

    let mut bb = Backbone::new(backbone_cfg.clone(), derive_seed(cfg.seed, &[tag::BACKBONE]))?;
    let c_h = backbone_cfg.high_channels();
    let mut head = ParamSet::new();
    let mut init = rng::stream(cfg.seed, &[tag::BACKBONE, 1]);
    head.push_conv("head", classes.len(), c_h, 1, true, &mut init);

    let n_trunk = bb.params.len();
    let mut joint = bb.params.clone();
    for (name, t) in head.iter() {
        joint.push(name, t.clone());
    }
    let mut opt = Sgd::new(&joint, cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order_rng = rng::stream(cfg.seed, &[tag::BACKBONE, 2]);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vars = joint.bind(&mut g, true);
            let (trunk_vars, head_vars) = vars.split_at(n_trunk);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = stream.sample(i);
                let image = if cfg.flip && order_rng.gen_bool(0.5) {
                    flip_horizontal(s).image
                } else {
                    s.image.clone()
                };
                let label = classes.binary_search(&s.class_id).expect("class of the stream");
                let x = g.constant(image);
                let stages = bb.forward_stages(&mut g, trunk_vars, x)?;
                let pooled = g.global_avg_pool(stages[backbone_cfg.high_stage])?;
                let z = g.conv2d(pooled, head_vars[0], Some(head_vars[1]), 1, 0)?;
                losses.push(g.softmax_ce(z, label)?);
            }
            let loss = g.mean(&losses)?;
            final_loss = g.value(loss).data()[0];
            if !final_loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            g.backward(loss)?;
            let grads = joint.grads_from(&g, &vars);
            let lr = poly_lr(step, total, cfg.lr, 0.9);
            opt.step(&mut joint, &grads, lr);
            step += 1;
        }
    }
    bb.params = split_trunk(&joint, n_trunk);
    let head = split_head(&joint, n_trunk);

    let mut correct = 0;
    for &i in &hold_idx {
        let s = stream.sample(i);
        let mut g = Graph::new();
        let tv = bb.params.bind(&mut g, false);
        let hv = head.bind(&mut g, false);
        let x = g.constant(s.image.clone());
        let stages = bb.forward_stages(&mut g, &tv, x)?;
        let pooled = g.global_avg_pool(stages[backbone_cfg.high_stage])?;
        let z = g.conv2d(pooled, hv[0], Some(hv[1]), 1, 0)?;
        let scores = g.value(z).data();
        let best = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .expect("at least two classes");
        correct += usize::from(classes[best] == s.class_id);
    }
    let holdout_accuracy = if hold_idx.is_empty() {
        f64::NAN
    } else {
        correct as f64 / hold_idx.len() as f64
    };
    log::info!(
        "pretrained on {} classes: held-out accuracy {:.1}% (chance {:.1}%)",
        classes.len(),
        100.0 * holdout_accuracy,
        100.0 / classes.len() as f64
    );
    Ok((
        bb,
        PretrainReport {
            split_index: split.split_index,
            seen_classes: seen,
            holdout_accuracy,
            chance: 1.0 / classes.len() as f64,
            final_loss,
            steps: step,
        },
    ))
}

fn split_trunk(joint: &ParamSet, n_trunk: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in joint.iter().take(n_trunk) {
        p.push(name, t.clone());
    }
    p
}

fn split_head(joint: &ParamSet, n_trunk: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in joint.iter().skip(n_trunk) {
        p.push(name, t.clone());
    }
    p
}

/// Backbone checkpoint carrying the seen-class manifest.
pub fn backbone_checkpoint(bb: &Backbone, report: &PretrainReport) -> Checkpoint {
    bb.to_checkpoint(serde_json::json!({ "pretrain": report }))
}

/// Classes a backbone checkpoint was pretrained on; empty for an untrained one.
pub fn seen_classes(ck: &Checkpoint) -> Result<BTreeSet<u32>> {
    match ck.meta.get("pretrain") {
        Some(p) => Ok(serde_json::from_value::<PretrainReport>(p.clone())?.seen_classes),
        None => Ok(BTreeSet::new()),
    }
}
