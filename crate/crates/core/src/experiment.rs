//! Whole-benchmark runs: pretrain per split, train cascade variants, score them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::episodes::{make_splits, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, EvalReport};
use crate::fusion::FusionNet;
use crate::pipeline::Segmenter;
use crate::pretrain::{backbone_checkpoint, check_no_leakage, pretrain_backbone, seen_classes};
use crate::refine::{CascadeConfig, PriorMode, WeightMode};
use crate::rng::{derive_seed, tag};
use crate::training::{network_checkpoint, train_sequential_from, train_shared, TrainConfig, TrainData};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const BACKBONE_REPORT_FILE: &str = "backbone.json";

/// Directory-safe name of a cascade variant, e.g. `t2-different-augmented`.
pub fn variant_slug(v: &CascadeConfig) -> String {
    v.label().to_lowercase().replace("t=", "t").replace(' ', "-")
}

/// Directory holding the backbone and cascade variants of one seed and split.
pub fn run_dir(out: &Path, seed: u64, split: usize) -> PathBuf {
    out.join(format!("seed{seed}")).join(format!("split{split}"))
}

/// Directory of one variant's checkpoints and logs inside a run directory.
pub fn variant_dir(run: &Path, v: &CascadeConfig) -> PathBuf {
    run.join(variant_slug(v))
}

/// Seed of the evaluation episodes of a run.
pub fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, &[tag::EVAL])
}

pub fn split_plan(cfg: &ExperimentConfig, dataset: &Dataset, index: usize) -> Result<SplitPlan> {
    let plans = make_splits(&dataset.class_ids(), cfg.n_splits)?;
    plans
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::config("split", format!("must be below n_splits = {}", cfg.n_splits)))
}

/// Load a backbone checkpoint and re-check that none of the split's test
/// classes was seen in pretraining.
pub fn load_backbone(path: &Path, split: &SplitPlan) -> Result<Backbone> {
    let ck = Checkpoint::load(path)?;
    check_no_leakage(&seen_classes(&ck)?, split)?;
    Backbone::from_checkpoint(&ck)
}

/// Pretrained backbone for `split`, read from `dir` when already there.
pub fn obtain_backbone(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split: &SplitPlan,
    dir: Option<&Path>,
) -> Result<Backbone> {
    let path = dir.map(|d| d.join(BACKBONE_FILE));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return load_backbone(p, split);
    }
    let stream = dataset.restricted_to(&split.train_classes);
    let (bb, report) = pretrain_backbone(&stream, split, &cfg.backbone, &cfg.pretrain)?;
    if let Some(p) = path {
        std::fs::create_dir_all(p.parent().expect("joined path")).map_err(|e| Error::io(&p, e))?;
        backbone_checkpoint(&bb, &report).save(&p)?;
        let rp = p.with_file_name(BACKBONE_REPORT_FILE);
        let text = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(&rp, text).map_err(|e| Error::io(&rp, e))?;
    }
    Ok(bb)
}

fn train_cfg(cfg: &ExperimentConfig, cascade: &CascadeConfig) -> TrainConfig {
    TrainConfig {
        cascade: cascade.clone(),
        ..cfg.train.clone()
    }
}


/// Load the networks trained under `train`, or `None` if any is missing.
/// A network trained under other settings is an error.
pub fn load_variant(dir: &Path, train: &TrainConfig) -> Result<Option<Vec<FusionNet>>> {
    let expected = train.fingerprint();
    let mut nets = Vec::with_capacity(train.cascade.n_networks());
    for t in 0..train.cascade.n_networks() {
        let p = network_checkpoint(dir, t);
        if !p.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&p)?;
        let fp = ck.meta["train"].as_str().unwrap_or_default();
        if fp != expected {
            return Err(Error::Fingerprint {
                checkpoint: fp.to_string(),
                config: expected,
            });
        }
        nets.push(FusionNet::from_checkpoint(&ck)?);
    }
    Ok(Some(nets))
}

/// Train every variant on one split. Different-weight variants share their
/// first network, which is trained once.
pub fn train_variants(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split: &SplitPlan,
    backbone: &Backbone,
    variants: &[CascadeConfig],
    dir: Option<&Path>,
) -> Result<Vec<Vec<FusionNet>>> {
    let data = TrainData {
        dataset,
        split,
        backbone,
        fusion: &cfg.fusion,
    };
    let first_cfg = CascadeConfig::new(1, WeightMode::Different, PriorMode::Augmented);
    let mut first: Option<FusionNet> = None;
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let vdir = dir.map(|d| variant_dir(d, v));
        let tc = train_cfg(cfg, v);
        if let Some(nets) = vdir.as_deref().map(|d| load_variant(d, &tc)).transpose()?.flatten() {
            out.push(nets);
            continue;
        }
        let nets = match v.weight_mode {
            WeightMode::Identical => vec![train_shared(&tc, data, vdir.as_deref())?.0],
            WeightMode::Different => {
                let g1 = match &first {
                    Some(n) => n.clone(),
                    None => {
                        let fdir = dir.map(|d| variant_dir(d, &first_cfg));
                        let (n, _) = train_sequential_from(&train_cfg(cfg, &first_cfg), data, vec![], fdir.as_deref())?;
                        first = Some(n[0].clone());
                        n[0].clone()
                    }
                };
                if let Some(d) = &vdir {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                    let meta = serde_json::json!({ "train": tc.fingerprint(), "stage": 0, "cascade": v });
                    g1.to_checkpoint(meta).save(&network_checkpoint(d, 0))?;
                }
                train_sequential_from(&tc, data, vec![g1], vdir.as_deref())?.0
            }
        };
        out.push(nets);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub variants: Vec<CascadeConfig>,
    /// `reports[split][variant]`.
    pub reports: Vec<Vec<EvalReport>>,
}

impl BenchmarkResult {
    /// mIoU of each variant averaged over splits.
    pub fn mean_miou(&self) -> Vec<f64> {
        (0..self.variants.len())
            .map(|v| self.reports.iter().map(|r| r[v].miou).sum::<f64>() / self.reports.len() as f64)
            .collect()
    }
}

/// Pretrain, train and evaluate every variant on every split of `dataset`,
/// with the same number of test episodes per split.
pub fn run_benchmark(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    variants: &[CascadeConfig],
    dir: Option<&Path>,
) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.n_splits);
    for s in 0..cfg.n_splits {
        let split = split_plan(cfg, dataset, s)?;
        let sdir = dir.map(|d| run_dir(d, cfg.seed, s));
        let bb = obtain_backbone(cfg, dataset, &split, sdir.as_deref())?;
        let trained = train_variants(cfg, dataset, &split, &bb, variants, sdir.as_deref())?;
        let mut row = Vec::with_capacity(variants.len());
        for (v, nets) in variants.iter().zip(trained) {
            let seg = Segmenter::new(bb.clone(), nets, v.clone())?;
            let r = evaluate_split(&seg, dataset, &split, cfg.eval.episodes, cfg.eval.shots, eval_seed(cfg))?;
            log::info!("split {s} {}: mIoU {:.2}", v.label(), 100.0 * r.miou);
            row.push(r);
        }
        reports.push(row);
    }
    Ok(BenchmarkResult {
        variants: variants.to_vec(),
        reports,
    })
}
