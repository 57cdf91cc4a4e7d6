//! Iterative refinement of the prior.
//!
//! Starting from `p⁽⁰⁾ = p_sim`, each step feeds the current estimate (or its
//! product with `p_sim`, renormalised) back into a fusion network together
//! with the same mid-level features, and turns the logits into a new
//! foreground probability map.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::episodes::Mask;
use crate::error::{Error, Result};
use crate::fusion::{BoundFusion, FusionNet, Logits};
use crate::graph::{minmax_forward, Graph, Var};
use crate::prior::{ProbKind, ProbMap};
use crate::tensor::{ResizeMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// One network applied at every step.
    Identical,
    /// A separate network per step.
    Different,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// Feed `p⁽ᵗ⁻¹⁾` back directly.
    Plain,
    /// Feed `norm(p⁽ᵗ⁻¹⁾ ⊙ p_sim)` back.
    Augmented,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Number of refinement steps `T`.
    pub steps: usize,
    pub weight_mode: WeightMode,
    pub prior_mode: PriorMode,
    pub threshold: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            weight_mode: WeightMode::Different,
            prior_mode: PriorMode::Augmented,
            threshold: 0.5,
        }
    }
}

impl CascadeConfig {
    pub fn new(steps: usize, weight_mode: WeightMode, prior_mode: PriorMode) -> Self {
        Self {
            steps,
            weight_mode,
            prior_mode,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("cascade.steps", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("cascade.threshold", "must be in (0,1)"));
        }
        Ok(())
    }

    /// Networks this configuration needs.
    pub fn n_networks(&self) -> usize {
        match self.weight_mode {
            WeightMode::Identical => 1,
            WeightMode::Different => self.steps,
        }
    }

    pub fn label(&self) -> String {
        let w = match self.weight_mode {
            WeightMode::Identical => "identical",
            WeightMode::Different => "different",
        };
        let p = match self.prior_mode {
            PriorMode::Plain => "plain",
            PriorMode::Augmented => "augmented",
        };
        format!("T={} {w} {p}", self.steps)
    }
}

/// Everything a cascade run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeTrace {
    /// `p⁽⁰⁾`.
    pub prior: ProbMap,
    /// `p⁽¹⁾ … p⁽ᵀ⁾`.
    pub estimates: Vec<ProbMap>,
    /// `p_aug⁽¹⁾ … p_aug⁽ᵀ⁾`, recorded in either prior mode.
    pub augmented: Vec<ProbMap>,
    pub logits: Vec<Logits>,
    /// Thresholded `p⁽ᵀ⁾` on the feature grid.
    pub mask: Mask,
    /// `p⁽ᵀ⁾` upsampled to image resolution, then thresholded.
    pub mask_full: Mask,
}

impl CascadeTrace {
    pub fn final_estimate(&self) -> &ProbMap {
        self.estimates.last().expect("at least one step")
    }
}

/// One refinement network placed on a graph.
pub trait RefineStep {
    /// `2×h×w` logits for `prior ⊕ support ⊕ query`.
    fn step_logits(&self, g: &mut Graph, prior: Var, support: Var, query: Var) -> Result<Var>;
}

impl RefineStep for BoundFusion<'_> {
    fn step_logits(&self, g: &mut Graph, prior: Var, support: Var, query: Var) -> Result<Var> {
        self.logits(g, prior, support, query)
    }
}

/// Graph nodes of an unrolled cascade.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub logits: Vec<Var>,
    pub estimates: Vec<Var>,
    pub augmented: Vec<Var>,
}

/// Record `T` refinement steps on `g`.
///
/// With `detach`, the estimate fed into step `t ≥ 2` is cut from the graph,
/// so each step's loss only reaches the network through that step.
pub fn unroll(
    g: &mut Graph,
    steps: &[&dyn RefineStep],
    prior: Var,
    support: Var,
    query: Var,
    cfg: &CascadeConfig,
    detach: bool,
) -> Result<Unrolled> {
    cfg.validate()?;
    if steps.len() != cfg.n_networks() {
        return Err(Error::NetworkCount {
            expected: cfg.n_networks(),
            got: steps.len(),
        });
    }
    let mut out = Unrolled {
        logits: Vec::with_capacity(cfg.steps),
        estimates: Vec::with_capacity(cfg.steps),
        augmented: Vec::with_capacity(cfg.steps),
    };
    let mut input = prior;
    for t in 0..cfg.steps {
        let net = match cfg.weight_mode {
            WeightMode::Identical => steps[0],
            WeightMode::Different => steps[t],
        };
        let fed = if detach && t > 0 { g.detach(input) } else { input };
        let z = net.step_logits(g, fed, support, query)?;
        let p = g.softmax_binary(z)?;
        let prod = g.mul(p, prior)?;
        let aug = g.minmax_norm(prod);
        input = match cfg.prior_mode {
            PriorMode::Plain => p,
            PriorMode::Augmented => aug,
        };
        out.logits.push(z);
        out.estimates.push(p);
        out.augmented.push(aug);
    }
    Ok(out)
}

/// Channel-1 probability of two-way softmax logits.
pub fn softmax_binary(z: &Logits) -> Result<ProbMap> {
    let mut g = Graph::new();
    let zv = g.constant(z.data.clone());
    let p = g.softmax_binary(zv)?;
    ProbMap::new(g.value(p).clone(), ProbKind::Estimate)
}

/// `norm(p ⊙ p_sim)` with the prior's min-max normalisation.
pub fn augment_prior(p: &ProbMap, p_sim: &ProbMap) -> Result<ProbMap> {
    if p.hw() != p_sim.hw() {
        return Err(Error::Shape(format!(
            "estimate {:?} vs prior {:?}",
            p.hw(),
            p_sim.hw()
        )));
    }
    let prod = Tensor::new(
        p.data.shape(),
        p.values().iter().zip(p_sim.values()).map(|(a, b)| a * b).collect(),
    )?;
    ProbMap::new(minmax_forward(&prod).0, ProbKind::Augmented)
}

/// Strict `p > threshold` per cell.
pub fn binarize(p: &ProbMap, threshold: f64) -> Mask {
    let (h, w) = p.hw();
    Mask::from_fn(h, w, |y, x| p.values()[y * w + x] > threshold)
}

/// Bilinearly upsample `p` to `h×w`, then threshold.
pub fn binarize_upsampled(p: &ProbMap, threshold: f64, h: usize, w: usize) -> Result<Mask> {
    let up = ProbMap {
        data: p.data.resize(h, w, ResizeMode::Bilinear)?,
        kind: p.kind,
    };
    Ok(binarize(&up, threshold))
}

/// Run the cascade on prepared inputs.
///
/// `support_mid` is the support representation on the query grid (the
/// broadcast prototype); `out_hw` is the image resolution of the final mask.
pub fn run_cascade_with(
    g: &mut Graph,
    steps: &[&dyn RefineStep],
    prior: &ProbMap,
    support_mid: &FeatureMap,
    query_mid: &FeatureMap,
    cfg: &CascadeConfig,
    out_hw: (usize, usize),
) -> Result<CascadeTrace> {
    let pv = g.constant(prior.data.clone());
    let sv = g.constant(support_mid.data.clone());
    let qv = g.constant(query_mid.data.clone());
    let u = unroll(g, steps, pv, sv, qv, cfg, false)?;
    let estimates: Vec<ProbMap> = u
        .estimates
        .iter()
        .map(|&v| ProbMap::new(g.value(v).clone(), ProbKind::Estimate))
        .collect::<Result<_>>()?;
    let augmented: Vec<ProbMap> = u
        .augmented
        .iter()
        .map(|&v| ProbMap::new(g.value(v).clone(), ProbKind::Augmented))
        .collect::<Result<_>>()?;
    debug_assert!(estimates.iter().chain(&augmented).all(ProbMap::in_unit_range));
    let logits = u
        .logits
        .iter()
        .map(|&v| Logits {
            data: g.value(v).clone(),
        })
        .collect();
    let last = estimates.last().expect("validated steps >= 1");
    let mask = binarize(last, cfg.threshold);
    let mask_full = binarize_upsampled(last, cfg.threshold, out_hw.0, out_hw.1)?;
    Ok(CascadeTrace {
        prior: prior.clone(),
        estimates,
        augmented,
        logits,
        mask,
        mask_full,
    })
}

/// [`run_cascade_with`] over fusion networks: one for identical weights, `T` for different.
pub fn run_cascade(
    networks: &[FusionNet],
    prior: &ProbMap,
    support_mid: &FeatureMap,
    query_mid: &FeatureMap,
    cfg: &CascadeConfig,
    out_hw: (usize, usize),
) -> Result<CascadeTrace> {
    cfg.validate()?;
    if networks.len() != cfg.n_networks() {
        return Err(Error::NetworkCount {
            expected: cfg.n_networks(),
            got: networks.len(),
        });
    }
    let mut g = Graph::new();
    let bound: Vec<BoundFusion> = networks.iter().map(|n| n.bind(&mut g, false)).collect();
    let steps: Vec<&dyn RefineStep> = bound.iter().map(|b| b as &dyn RefineStep).collect();
    run_cascade_with(&mut g, &steps, prior, support_mid, query_mid, cfg, out_hw)
}

/// Average `K` masked mid-level maps and `K` priors.
pub fn kshot_aggregate(
    mid_features: &[FeatureMap],
    priors: &[ProbMap],
) -> Result<(FeatureMap, ProbMap)> {
    let (first_f, first_p) = match (mid_features.first(), priors.first()) {
        (Some(f), Some(p)) => (f, p),
        _ => return Err(Error::Empty("k-shot aggregation of zero supports")),
    };
    if mid_features.len() != priors.len() {
        return Err(Error::Shape(format!(
            "{} feature maps vs {} priors",
            mid_features.len(),
            priors.len()
        )));
    }
    let k = mid_features.len() as f64;
    let mut f_sum = first_f.data.clone();
    for f in &mid_features[1..] {
        if f.data.shape() != f_sum.shape() {
            return Err(Error::Shape("k-shot feature shapes differ".into()));
        }
        f_sum.add_assign(&f.data);
    }
    let mut p_sum = first_p.data.clone();
    for p in &priors[1..] {
        if p.data.shape() != p_sum.shape() {
            return Err(Error::Shape("k-shot prior shapes differ".into()));
        }
        p_sum.add_assign(&p.data);
    }
    Ok((
        FeatureMap {
            data: f_sum.map(|v| v / k),
            level: first_f.level,
            stride: first_f.stride,
        },
        ProbMap::new(p_sum.map(|v| v / k), ProbKind::Prior)?,
    ))
}
