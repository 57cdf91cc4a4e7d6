//! Episodic training of the refinement networks.
//!
//! Identical weights train one network on the mean of the per-step losses of
//! the unrolled cascade. Different weights train the networks one after the
//! other: stage `t` trains `G⁽ᵗ⁾` on the loss of step `t` while every earlier
//! network stays frozen.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::episodes::{augment, sample_episode_from, AugmentConfig, Dataset, Episode, Mask, SplitPlan};
use crate::error::{Error, Result};
use crate::evaluation::{sample_eval_episodes, ClassCounts, IouCounts};
use crate::fusion::{FusionConfig, FusionNet, Logits};
use crate::graph::{softplus, Graph, Var};
use crate::optim::{poly_lr, Sgd};
use crate::params::ParamSet;
use crate::pipeline::{prepare, prepare_episode, FeatureBank, Prepared, SampleFeatures};
use crate::prior::ProbMap;
use crate::refine::{run_cascade, unroll, CascadeConfig, RefineStep, WeightMode};
use crate::rng::{self, derive_seed, tag};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// How the epoch budget is shared between sequential stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequentialBudget {
    /// Every stage trains for the full `epochs`.
    PerStage,
    /// `epochs` is divided between the stages.
    SplitEvenly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Support images per training episode.
    pub shots: usize,
    /// Cut the gradient between consecutive refinement steps.
    pub detach: bool,
    pub sequential_budget: SequentialBudget,
    /// Start each sequential stage from the weights of the previous one.
    pub warm_start: bool,
    /// Test-class episodes scored after every epoch; 0 disables validation.
    pub val_episodes: usize,
    /// Set from the experiment's root seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub cascade: CascadeConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            steps_per_epoch: 25,
            batch_size: 4,
            base_lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            shots: 1,
            detach: false,
            sequential_budget: SequentialBudget::PerStage,
            warm_start: true,
            val_episodes: 0,
            seed: 0,
            cascade: CascadeConfig::default(),
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs),
            ("train.steps_per_epoch", self.steps_per_epoch),
            ("train.batch_size", self.batch_size),
            ("train.shots", self.shots),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config("train.poly_power", "must be positive"));
        }
        self.cascade.validate()
    }

    /// Epochs of each sequential stage.
    pub fn stage_epochs(&self) -> Vec<usize> {
        let t = self.cascade.steps;
        match self.sequential_budget {
            SequentialBudget::PerStage => vec![self.epochs; t],
            SequentialBudget::SplitEvenly => (0..t)
                .map(|i| (self.epochs / t + usize::from(i < self.epochs % t)).max(1))
                .collect(),
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("plain config");
        v["seed"] = self.seed.into();
        crate::fingerprint(v.to_string().as_bytes())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        stage: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
        wall_ms: u64,
    },
    Epoch {
        stage: usize,
        epoch: usize,
        step: usize,
        mean_loss: f64,
        val_miou: Option<f64>,
        /// Checksums of the networks of earlier, frozen stages.
        frozen_checksums: Vec<u64>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// `(step, lr, loss)` of every optimizer step.
    pub fn steps(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.records.iter().filter_map(|r| match *r {
            LogRecord::Step { step, lr, loss, .. } => Some((step, lr, loss)),
            LogRecord::Epoch { .. } => None,
        })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps().map(|(_, _, l)| l).collect()
    }

    pub fn val_mious(&self) -> Vec<(usize, usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match *r {
                LogRecord::Epoch {
                    stage,
                    epoch,
                    val_miou: Some(m),
                    ..
                } => Some((stage, epoch, m)),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, self.to_jsonl()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Moving average over a trailing window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn check_grid(p: &ProbMap, y: &Mask) -> Result<()> {
    if p.hw() != (y.h(), y.w()) {
        return Err(Error::Shape(format!(
            "estimate {:?} vs target {}×{}",
            p.hw(),
            y.h(),
            y.w()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of `p` against `y`.
pub fn cross_entropy(p: &ProbMap, y: &Mask) -> Result<f64> {
    check_grid(p, y)?;
    let n = p.values().len() as f64;
    let total: f64 = p
        .values()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(-p).ln_1p()
            }
        })
        .sum();
    Ok(total / n)
}

/// Cross-entropy of the channel-1 softmax probability, from the logits.
pub fn cross_entropy_logits(z: &Logits, y: &Mask) -> Result<f64> {
    let (c, h, w) = z.data.chw()?;
    if c != 2 || (h, w) != (y.h(), y.w()) {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {}×{}",
            z.data.shape(),
            y.h(),
            y.w()
        )));
    }
    let (z0, z1) = z.data.data().split_at(h * w);
    let total: f64 = z0
        .iter()
        .zip(z1)
        .zip(y.data())
        .map(|((&a, &b), &y)| if y == 1 { softplus(a - b) } else { softplus(b - a) })
        .sum();
    Ok(total / (h * w) as f64)
}

/// Unweighted mean of the per-step cross-entropies.
pub fn loss_shared(estimates: &[ProbMap], y: &Mask) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("loss over zero refinement steps"));
    }
    let mut total = 0.0;
    for p in estimates {
        total += cross_entropy(p, y)?;
    }
    Ok(total / estimates.len() as f64)
}

/// Training inputs shared by both weight modes.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a SplitPlan,
    pub backbone: &'a Backbone,
    pub fusion: &'a FusionConfig,
}

/// One training example: cascade inputs plus the target on the feature grid.
struct Example {
    input: Prepared,
    target: Vec<f64>,
}

impl Example {
    fn new(input: Prepared, mask: &Mask) -> Self {
        let (h, w) = input.query_mid.hw();
        let target = mask.resize_nearest(h, w).to_f64();
        Self { input, target }
    }
}

/// Which loss a training stage optimizes.
#[derive(Clone, Copy)]
enum Objective {
    /// Mean over all steps of the unroll.
    AllSteps,
    /// The last step only.
    LastStep,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: TrainData<'a>,
    classes: Vec<u32>,
    bank: Option<FeatureBank>,
    val: Vec<(Prepared, Mask, u32)>,
    grid: (usize, usize),
    out: Option<PathBuf>,
    log: TrainLog,
    clock: Instant,
    wall_offset: u64,
}

const STATE_FILE: &str = "train_state.ckpt";
const LOG_FILE: &str = "train_log.jsonl";

/// Path of the final checkpoint of network `t` (0-based).
pub fn network_checkpoint(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("cascade-g{}.ckpt", t + 1))
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, data: TrainData<'a>, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        data.fusion.validate()?;
        if data.fusion.mid_channels != data.backbone.cfg.mid_channels() {
            return Err(Error::config(
                "fusion.mid_channels",
                format!("must equal the backbone's {}", data.backbone.cfg.mid_channels()),
            ));
        }
        let classes: Vec<u32> = data
            .split
            .train_classes
            .iter()
            .copied()
            .filter(|&c| data.dataset.indices_of(c).len() > cfg.shots)
            .collect();
        if classes.is_empty() {
            return Err(Error::Empty("no train class has enough samples for an episode"));
        }
        let train_idx = data.dataset.indices_in(&data.split.train_classes);
        let first = data.dataset.sample(train_idx[0]);
        let (h, w) = match cfg.augment.as_ref().and_then(|a| a.crop) {
            Some(c) => (c, c),
            None => first.hw(),
        };
        let grid = (data.backbone.cfg.grid_sizes(h).0, data.backbone.cfg.grid_sizes(w).0);
        let bank = match cfg.augment {
            None => Some(FeatureBank::build(data.backbone, data.dataset, &train_idx)?),
            Some(_) => None,
        };
        let mut val = Vec::new();
        if cfg.val_episodes > 0 {
            let eps = sample_eval_episodes(data.dataset, data.split, cfg.val_episodes, cfg.shots, derive_seed(cfg.seed, &[tag::EVAL]))?;
            for ep in eps {
                let input = prepare_episode(data.backbone, &ep)?;
                val.push((input, ep.query.mask.clone(), ep.class_id));
            }
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            cfg,
            data,
            classes,
            bank,
            val,
            grid,
            out: out.map(Path::to_path_buf),
            log: TrainLog::default(),
            clock: Instant::now(),
            wall_offset: 0,
        })
    }

    fn fresh_network(&self, stage: usize) -> Result<FusionNet> {
        FusionNet::new(
            self.data.fusion.clone(),
            self.grid,
            derive_seed(self.cfg.seed, &[tag::MODEL, stage as u64]),
        )
    }

    fn example(&self, ep: &Episode, aug_rng: &mut rng::Rng) -> Result<Example> {
        match (&self.bank, &self.cfg.augment) {
            (Some(bank), _) => {
                let feats = |i: usize| bank.get(i).ok_or(Error::Empty("feature bank miss"));
                let support: Vec<&SampleFeatures> = ep.support_ids.iter().map(|&i| feats(i)).collect::<Result<_>>()?;
                let shots: Vec<(&SampleFeatures, &Mask)> =
                    support.into_iter().zip(&ep.support).map(|(f, s)| (f, &s.mask)).collect();
                let input = prepare(&shots, feats(ep.query_id)?, ep.query.hw())?;
                Ok(Example::new(input, &ep.query.mask))
            }
            (None, Some(acfg)) => {
                let support = ep
                    .support
                    .iter()
                    .map(|s| augment(s, acfg, aug_rng))
                    .collect::<Result<Vec<_>>>()?;
                let query = augment(&ep.query, acfg, aug_rng)?;
                let ep = Episode {
                    support,
                    query,
                    ..ep.clone()
                };
                let input = prepare_episode(self.data.backbone, &ep)?;
                Ok(Example::new(input, &ep.query.mask))
            }
            (None, None) => unreachable!("a feature bank exists whenever augmentation is off"),
        }
    }

    /// Loss of one batch on a fresh graph; returns the graph, the loss node
    /// and the trainable variables.
    fn batch_loss(
        &self,
        batch: &[Example],
        trainable: &FusionNet,
        frozen: &[FusionNet],
        cascade: &CascadeConfig,
        objective: Objective,
    ) -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let frozen_bound: Vec<_> = frozen.iter().map(|n| n.bind(&mut g, false)).collect();
        let live = trainable.bind(&mut g, true);
        let mut steps: Vec<&dyn RefineStep> = frozen_bound.iter().map(|b| b as &dyn RefineStep).collect();
        steps.push(&live);
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let p = g.constant(ex.input.prior.data.clone());
            let s = g.constant(ex.input.support.data.clone());
            let q = g.constant(ex.input.query_mid.data.clone());
            let u = unroll(&mut g, &steps, p, s, q, cascade, self.cfg.detach)?;
            let per_step: Vec<Var> = match objective {
                Objective::AllSteps => u
                    .logits
                    .iter()
                    .map(|&z| g.bce_logits(z, &ex.target))
                    .collect::<Result<_>>()?,
                Objective::LastStep => {
                    vec![g.bce_logits(*u.logits.last().expect("steps >= 1"), &ex.target)?]
                }
            };
            losses.push(g.mean(&per_step)?);
        }
        let loss = g.mean(&losses)?;
        let vars = live.vars.clone();
        Ok((g, loss, vars))
    }

    fn validate(&self, nets: &[FusionNet], cascade: &CascadeConfig) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut counts = ClassCounts::default();
        for (input, gt, class) in &self.val {
            let t = run_cascade(nets, &input.prior, &input.support, &input.query_mid, cascade, input.image_hw)?;
            counts.add(*class, IouCounts::of(&t.mask_full, gt)?);
        }
        Ok(Some(counts.miou()))
    }

    fn state_path(&self) -> Option<PathBuf> {
        self.out.as_ref().map(|d| d.join(STATE_FILE))
    }

    fn save_state(&self, stage: usize, epochs_done: usize, step: usize, net: &FusionNet, opt: &Sgd) -> Result<()> {
        let Some(path) = self.state_path() else { return Ok(()) };
        let mut params = net.params.clone();
        for ((name, _), v) in net.params.iter().zip(opt.velocity()) {
            params.push(format!("velocity/{name}"), v.clone());
        }
        let meta = serde_json::json!({
            "train": self.cfg.fingerprint(),
            "stage": stage,
            "epochs_done": epochs_done,
            "step": step,
            "network": net.to_checkpoint(serde_json::Value::Null).meta,
        });
        Checkpoint {
            kind: "train_state".into(),
            meta,
            params,
        }
        .save(&path)?;
        self.log.save(&self.out.as_ref().expect("has state path").join(LOG_FILE))
    }

    /// Resume point of `stage`: network, optimizer, epochs done, next step.
    fn load_state(&mut self, stage: usize) -> Result<Option<(FusionNet, Sgd, usize, usize)>> {
        let Some(path) = self.state_path() else { return Ok(None) };
        if !path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&path)?;
        let fp = ck.meta["train"].as_str().unwrap_or_default().to_string();
        if fp != self.cfg.fingerprint() {
            return Err(Error::Fingerprint {
                checkpoint: fp,
                config: self.cfg.fingerprint(),
            });
        }
        if ck.meta["stage"].as_u64() != Some(stage as u64) {
            return Ok(None);
        }
        let n = ck.params.len() / 2;
        let mut weights = ParamSet::new();
        let mut velocity = Vec::with_capacity(n);
        for (i, (name, t)) in ck.params.iter().enumerate() {
            if i < n {
                weights.push(name, t.clone());
            } else {
                velocity.push(t.clone());
            }
        }
        let net = FusionNet::from_checkpoint(&Checkpoint {
            kind: "fusion".into(),
            meta: ck.meta["network"].clone(),
            params: weights,
        })?;
        let mut opt = Sgd::new(&net.params, self.cfg.momentum, self.cfg.weight_decay);
        opt.set_velocity(velocity);
        let log_path = self.out.as_ref().expect("has state path").join(LOG_FILE);
        self.log = TrainLog::load(&log_path)?;
        self.wall_offset = self
            .log
            .records
            .iter()
            .rev()
            .find_map(|r| match r {
                LogRecord::Step { wall_ms, .. } => Some(*wall_ms),
                _ => None,
            })
            .unwrap_or(0);
        let epochs_done = ck.meta["epochs_done"].as_u64().unwrap_or(0) as usize;
        let step = ck.meta["step"].as_u64().unwrap_or(0) as usize;
        log::info!("resuming stage {} after epoch {epochs_done}", stage + 1);
        Ok(Some((net, opt, epochs_done, step)))
    }

    /// Train one network for `epochs` epochs on top of `frozen`.
    fn train_stage(
        &mut self,
        stage: usize,
        epochs: usize,
        frozen: &[FusionNet],
        cascade: &CascadeConfig,
        objective: Objective,
        first_step: usize,
    ) -> Result<(FusionNet, usize)> {
        let (mut net, mut opt, start_epoch, mut step) = match self.load_state(stage)? {
            Some(s) => s,
            None => {
                let net = match frozen.last() {
                    Some(prev) if self.cfg.warm_start => prev.clone(),
                    _ => self.fresh_network(stage)?,
                };
                let opt = Sgd::new(&net.params, self.cfg.momentum, self.cfg.weight_decay);
                (net, opt, 0, first_step)
            }
        };
        let total = epochs * self.cfg.steps_per_epoch;
        for epoch in start_epoch..epochs {
            let mut ep_rng = rng::stream(self.cfg.seed, &[tag::EPISODE, stage as u64, epoch as u64]);
            let mut aug_rng = rng::stream(self.cfg.seed, &[tag::AUGMENT, stage as u64, epoch as u64]);
            let mut loss_sum = 0.0;
            for i in 0..self.cfg.steps_per_epoch {
                let local = epoch * self.cfg.steps_per_epoch + i;
                let batch = (0..self.cfg.batch_size)
                    .map(|_| {
                        let ep = sample_episode_from(self.data.dataset, &self.classes, self.cfg.shots, &mut ep_rng)?;
                        self.example(&ep, &mut aug_rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (mut g, loss, vars) = self.batch_loss(&batch, &net, frozen, cascade, objective)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    log::error!("non-finite loss at step {step}; last good state is the previous epoch");
                    return Err(Error::Divergence { step });
                }
                g.backward(loss)?;
                let grads = net.params.grads_from(&g, &vars);
                let lr = poly_lr(local, total, self.cfg.base_lr, self.cfg.poly_power);
                opt.step(&mut net.params, &grads, lr);
                if !net.params.all_finite() {
                    return Err(Error::Divergence { step });
                }
                loss_sum += value;
                self.log.records.push(LogRecord::Step {
                    step,
                    stage,
                    epoch,
                    lr,
                    loss: value,
                    wall_ms: self.wall_offset + self.clock.elapsed().as_millis() as u64,
                });
                step += 1;
            }
            let mut nets = frozen.to_vec();
            nets.push(net.clone());
            let val_miou = self.validate(&nets, cascade)?;
            let mean_loss = loss_sum / self.cfg.steps_per_epoch as f64;
            let frozen_checksums: Vec<u64> = frozen.iter().map(|n| n.params.checksum()).collect();
            log::info!(
                "stage {} epoch {}/{epochs}: loss {mean_loss:.4}{}",
                stage + 1,
                epoch + 1,
                val_miou.map(|m| format!(", val mIoU {:.2}", 100.0 * m)).unwrap_or_default()
            );
            self.log.records.push(LogRecord::Epoch {
                stage,
                epoch,
                step,
                mean_loss,
                val_miou,
                frozen_checksums,
            });
            self.save_state(stage, epoch + 1, step, &net, &opt)?;
        }
        if let Some(dir) = &self.out {
            let meta = serde_json::json!({
                "train": self.cfg.fingerprint(),
                "stage": stage,
                "cascade": self.cfg.cascade,
            });
            net.to_checkpoint(meta).save(&network_checkpoint(dir, stage))?;
        }
        Ok((net, step))
    }

    /// A finished stage saved by an earlier, interrupted run.
    fn finished_stage(&self, stage: usize) -> Result<Option<FusionNet>> {
        let Some(dir) = &self.out else { return Ok(None) };
        let path = network_checkpoint(dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&path)?;
        let fp = ck.meta["train"].as_str().unwrap_or_default().to_string();
        if fp != self.cfg.fingerprint() {
            return Err(Error::Fingerprint {
                checkpoint: fp,
                config: self.cfg.fingerprint(),
            });
        }
        Ok(Some(FusionNet::from_checkpoint(&ck)?))
    }

    fn finish(self) -> Result<TrainLog> {
        if let Some(dir) = &self.out {
            self.log.save(&dir.join(LOG_FILE))?;
            let state = dir.join(STATE_FILE);
            if state.exists() {
                std::fs::remove_file(&state).map_err(|e| Error::io(&state, e))?;
            }
        }
        Ok(self.log)
    }
}

/// Train one network shared by every step on the mean per-step loss.
///
/// With `out`, the state is saved after every epoch and an interrupted run
/// resumes from the last completed epoch.
pub fn train_shared(cfg: &TrainConfig, data: TrainData, out: Option<&Path>) -> Result<(FusionNet, TrainLog)> {
    if cfg.cascade.weight_mode != WeightMode::Identical {
        return Err(Error::config("cascade.weight_mode", "shared training needs identical weights"));
    }
    let mut tr = Trainer::new(cfg, data, out)?;
    let net = match tr.finished_stage(0)? {
        Some(n) => n,
        None => tr.train_stage(0, cfg.epochs, &[], &cfg.cascade, Objective::AllSteps, 0)?.0,
    };
    Ok((net, tr.finish()?))
}

/// Train `G⁽¹⁾ … G⁽ᵀ⁾` one after another, freezing each finished stage.
pub fn train_sequential(cfg: &TrainConfig, data: TrainData, out: Option<&Path>) -> Result<(Vec<FusionNet>, TrainLog)> {
    train_sequential_from(cfg, data, Vec::new(), out)
}

/// [`train_sequential`] starting from already trained early stages, for
/// instance a `T = 1` model extended to `T = 2`.
pub fn train_sequential_from(
    cfg: &TrainConfig,
    data: TrainData,
    pretrained: Vec<FusionNet>,
    out: Option<&Path>,
) -> Result<(Vec<FusionNet>, TrainLog)> {
    if cfg.cascade.weight_mode != WeightMode::Different {
        return Err(Error::config("cascade.weight_mode", "sequential training needs different weights"));
    }
    if pretrained.len() > cfg.cascade.steps {
        return Err(Error::NetworkCount {
            expected: cfg.cascade.steps,
            got: pretrained.len(),
        });
    }
    let mut tr = Trainer::new(cfg, data, out)?;
    let budget = cfg.stage_epochs();
    let mut nets = pretrained;
    let mut step = 0;
    for stage in nets.len()..cfg.cascade.steps {
        if let Some(n) = tr.finished_stage(stage)? {
            nets.push(n);
            continue;
        }
        let cascade = CascadeConfig {
            steps: stage + 1,
            ..cfg.cascade.clone()
        };
        let (net, next) = tr.train_stage(stage, budget[stage], &nets, &cascade, Objective::LastStep, step)?;
        step = next;
        nets.push(net);
    }
    Ok((nets, tr.finish()?))
}

/// Dispatch on the weight mode.
pub fn train(cfg: &TrainConfig, data: TrainData, out: Option<&Path>) -> Result<(Vec<FusionNet>, TrainLog)> {
    match cfg.cascade.weight_mode {
        WeightMode::Identical => train_shared(cfg, data, out).map(|(n, l)| (vec![n], l)),
        WeightMode::Different => train_sequential(cfg, data, out),
    }
}

/// Gradient of the mean per-step loss with respect to each step's logits,
/// for checking against finite differences.
pub fn loss_shared_logit_grads(logits: &[Tensor], target: &Mask) -> Result<(f64, Vec<Tensor>)> {
    let y = target.to_f64();
    let mut g = Graph::new();
    let zs: Vec<Var> = logits.iter().map(|z| g.param(z.clone())).collect();
    let per: Vec<Var> = zs.iter().map(|&z| g.bce_logits(z, &y)).collect::<Result<_>>()?;
    let loss = g.mean(&per)?;
    g.backward(loss)?;
    let grads = zs.iter().map(|&z| g.grad(z).cloned().unwrap_or_else(|| Tensor::zeros(g.value(z).shape()))).collect();
    Ok((g.value(loss).data()[0], grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::ProbKind;
    use rand::Rng;

    #[test]
    fn cross_entropy_examples() {
        let y = Mask::from_fn(3, 3, |r, c| (r + c) % 2 == 0);
        let perfect = ProbMap::new(Tensor::from_fn(&[1, 3, 3], |i| y.data()[i] as f64), ProbKind::Estimate).unwrap();
        let l = cross_entropy(&perfect, &y).unwrap();
        assert!(l <= PROB_EPS * PROB_EPS.ln().abs());

        let half = ProbMap::new(Tensor::full(&[1, 3, 3], 0.5), ProbKind::Estimate).unwrap();
        assert_eq!(cross_entropy(&half, &y).unwrap(), std::f64::consts::LN_2);

        let mut r = rng::stream(5, &[]);
        let p = ProbMap::new(Tensor::from_fn(&[1, 3, 3], |_| r.gen_range(0.01..0.99)), ProbKind::Estimate).unwrap();
        let mut oracle = 0.0;
        for yy in 0..3 {
            for xx in 0..3 {
                let (pv, yv) = (p.values()[yy * 3 + xx], y.get(yy, xx) as u8 as f64);
                oracle -= yv * pv.ln() + (1.0 - yv) * (1.0 - pv).ln();
            }
        }
        assert!((cross_entropy(&p, &y).unwrap() - oracle / 9.0).abs() < 1e-7);
        assert!(cross_entropy(&p, &Mask::zeros(2, 3)).is_err());
    }

    #[test]
    fn logit_and_probability_forms_agree() {
        let mut r = rng::stream(6, &[]);
        let z = Logits { data: Tensor::from_fn(&[2, 4, 4], |_| r.gen_range(-4.0..4.0)) };
        let y = Mask::from_fn(4, 4, |a, b| a > b);
        let p = crate::refine::softmax_binary(&z).unwrap();
        let a = cross_entropy_logits(&z, &y).unwrap();
        let b = cross_entropy(&p, &y).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn loss_shared_examples() {
        let mut r = rng::stream(7, &[]);
        let y = Mask::from_fn(3, 3, |a, _| a == 1);
        let maps: Vec<ProbMap> = (0..3)
            .map(|_| ProbMap::new(Tensor::from_fn(&[1, 3, 3], |_| r.gen_range(0.05..0.95)), ProbKind::Estimate).unwrap())
            .collect();
        assert_eq!(loss_shared(&maps[..1], &y).unwrap(), cross_entropy(&maps[0], &y).unwrap());
        let twice = [maps[1].clone(), maps[1].clone()];
        assert!((loss_shared(&twice, &y).unwrap() - cross_entropy(&maps[1], &y).unwrap()).abs() < 1e-15);
        let sum: f64 = maps.iter().map(|m| cross_entropy(m, &y).unwrap()).sum();
        assert!((loss_shared(&maps, &y).unwrap() - sum / 3.0).abs() < 1e-7);
        assert!(loss_shared(&[], &y).is_err());
    }

    #[test]
    fn loss_shared_logit_gradient_matches_finite_differences() {
        let mut r = rng::stream(8, &[]);
        let y = Mask::from_fn(3, 3, |a, b| (a * b) % 2 == 1);
        let zs: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[2, 3, 3], |_| r.gen_range(-3.0..3.0))).collect();
        let (_, grads) = loss_shared_logit_grads(&zs, &y).unwrap();
        let f = |zs: &[Tensor]| {
            let maps: Vec<ProbMap> = zs.iter().map(|z| crate::refine::softmax_binary(&Logits { data: z.clone() }).unwrap()).collect();
            loss_shared(&maps, &y).unwrap()
        };
        let h = 1e-6;
        for t in 0..2 {
            for i in 0..18 {
                let mut plus = zs.clone();
                plus[t].data_mut()[i] += h;
                let mut minus = zs.clone();
                minus[t].data_mut()[i] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grads[t].data()[i];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-8), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn stage_budgets() {
        let mut cfg = TrainConfig { epochs: 7, ..TrainConfig::default() };
        cfg.cascade.steps = 3;
        assert_eq!(cfg.stage_epochs(), vec![7, 7, 7]);
        cfg.sequential_budget = SequentialBudget::SplitEvenly;
        assert_eq!(cfg.stage_epochs(), vec![3, 2, 2]);
    }

    #[test]
    fn validation_names_fields() {
        let cfg = TrainConfig { momentum: 1.0, ..TrainConfig::default() };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.momentum"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn smoothing_and_log_round_trip() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        let log = TrainLog {
            records: vec![
                LogRecord::Step { step: 0, stage: 0, epoch: 0, lr: 0.1, loss: 0.5, wall_ms: 3 },
                LogRecord::Epoch { stage: 0, epoch: 0, step: 1, mean_loss: 0.5, val_miou: None, frozen_checksums: vec![] },
            ],
        };
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
        assert_eq!(log.steps().collect::<Vec<_>>(), vec![(0, 0.1, 0.5)]);
    }
}
