//! The trainable refinement network.
//!
//! Input is the channel concatenation `prior ⊕ support ⊕ query` (prior at
//! channel 0). A 1×1 conv reduces it to `width` channels, the result is
//! area-resized to every pyramid scale, each scale gets a 3×3 conv block,
//! and scales are merged top-down: each finer scale is concatenated with the
//! upsampled output of the next coarser one and convolved again. The finest
//! merged map is resized back to the input grid and a 3×3 conv plus a 1×1
//! classifier produce two-channel logits.
//!
//! This keeps the multi-scale skeleton of a feature enrichment module with
//! plain conv blocks; there is no attention between scales.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, Level};
use crate::checkpoint::Checkpoint;
use crate::episodes::Mask;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::prior::ProbMap;
use crate::rng::{self, tag};
use crate::tensor::{Resampler, ResizeMode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Channels of each mid-level feature map (support and query).
    pub mid_channels: usize,
    pub width: usize,
    /// Explicit pyramid sizes, finest first. Empty means `{h, h/2, h/4, h/8}`.
    pub scales: Vec<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mid_channels: 56,
            width: 24,
            scales: Vec::new(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mid_channels == 0 {
            return Err(Error::config("fusion.mid_channels", "must be positive"));
        }
        if self.width == 0 {
            return Err(Error::config("fusion.width", "must be positive"));
        }
        if self.scales.contains(&0) {
            return Err(Error::config("fusion.scales", "sizes must be positive"));
        }
        Ok(())
    }

    /// Pyramid sizes for an `h×w` grid, finest first.
    ///
    /// The default keeps four levels in the proportions `1, 1/2, 1/4, 1/8`
    /// (a 60-cell grid gives `{60, 30, 15, 8}`). Explicit sizes larger than
    /// the grid are dropped.
    pub fn resolve_scales(&self, h: usize, w: usize) -> Vec<usize> {
        let side = h.min(w);
        let mut scales: Vec<usize> = if self.scales.is_empty() {
            [1.0, 2.0, 4.0, 8.0]
                .iter()
                .map(|d| ((side as f64 / d).round() as usize).max(1))
                .collect()
        } else {
            let mut s = self.scales.clone();
            s.sort_unstable_by(|a, b| b.cmp(a));
            let kept: Vec<usize> = s.iter().copied().filter(|&v| v <= side).collect();
            if kept.len() < s.len() {
                log::warn!(
                    "grid {h}×{w} is smaller than pyramid sizes {:?}; using {kept:?}",
                    s
                );
            }
            kept
        };
        scales.dedup();
        if scales.is_empty() {
            scales.push(side);
        }
        scales
    }

    pub fn in_channels(&self) -> usize {
        1 + 2 * self.mid_channels
    }

    /// Number of scalar parameters for a pyramid of `n_scales` levels.
    pub fn param_count(&self, n_scales: usize) -> usize {
        let (c, f) = (self.in_channels(), self.width);
        let reduce = c * f + f;
        let blocks = n_scales * (9 * f * f + f);
        let merges = n_scales.saturating_sub(1) * (9 * 2 * f * f + f);
        let head = 9 * f * f + f + 2 * f + 2;
        reduce + blocks + merges + head
    }
}

/// Two-channel logits `z` on the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub data: Tensor,
}

/// Concatenation inputs for one refinement step, all on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInput {
    pub prior: ProbMap,
    pub support_mid: FeatureMap,
    pub query_mid: FeatureMap,
}

impl FusionInput {
    /// Bundles the inputs; the prior is bilinearly resized to the mid grid if needed.
    pub fn new(prior: ProbMap, support_mid: FeatureMap, query_mid: FeatureMap) -> Result<Self> {
        let (h, w) = query_mid.hw();
        if support_mid.hw() != (h, w) {
            return Err(Error::Shape(format!(
                "support grid {:?} vs query grid {h}×{w}",
                support_mid.hw()
            )));
        }
        if support_mid.channels() != query_mid.channels() {
            return Err(Error::Shape("support/query mid channel mismatch".into()));
        }
        let prior = if prior.hw() != (h, w) {
            prior.resized(h, w)?
        } else {
            prior
        };
        Ok(Self {
            prior,
            support_mid,
            query_mid,
        })
    }
}

/// Support prototype broadcast over the query grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub features: FeatureMap,
    /// Set when the mask had no mass on the feature grid.
    pub empty_mask: bool,
}

/// Masked average pooling of (already masked) support features.
///
/// `soft_mask` is the support mask on the feature grid; the prototype is
/// `Σ f′ / Σ m`, i.e. the mask-weighted mean of the unmasked features.
pub fn condense_support(
    support_mid_masked: &FeatureMap,
    soft_mask: &[f64],
    out_hw: (usize, usize),
) -> Result<Prototype> {
    let (c, h, w) = support_mid_masked.data.chw()?;
    if soft_mask.len() != h * w {
        return Err(Error::Shape(format!(
            "mask has {} cells, features are {h}×{w}",
            soft_mask.len()
        )));
    }
    let mass: f64 = soft_mask.iter().sum();
    let empty_mask = mass <= 0.0;
    let proto: Vec<f64> = (0..c)
        .map(|ch| {
            if empty_mask {
                0.0
            } else {
                support_mid_masked.data.channel(ch).iter().sum::<f64>() / mass
            }
        })
        .collect();
    if empty_mask {
        log::warn!("support mask has no foreground on the feature grid; using a zero prototype");
    }
    let (oh, ow) = out_hw;
    let data = Tensor::from_fn(&[c, oh, ow], |i| proto[i / (oh * ow)]);
    Ok(Prototype {
        features: FeatureMap::new(data, Level::Mid, support_mid_masked.stride)?,
        empty_mask,
    })
}

/// Convenience form of [`condense_support`] taking the image-resolution mask.
pub fn condense_support_mask(support_mid_masked: &FeatureMap, mask: &Mask) -> Result<Prototype> {
    let (h, w) = support_mid_masked.hw();
    condense_support(support_mid_masked, &mask.resize_area(h, w), (h, w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    pub cfg: FusionConfig,
    /// Input grid this network was built for.
    pub grid: (usize, usize),
    pub scales: Vec<usize>,
    pub params: ParamSet,
}

/// Parameter handles of a [`FusionNet`] placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundFusion<'a> {
    pub net: &'a FusionNet,
    pub vars: Vec<Var>,
}

impl FusionNet {
    pub fn new(cfg: FusionConfig, grid: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        let scales = cfg.resolve_scales(grid.0, grid.1);
        let mut r = rng::stream(seed, &[tag::MODEL]);
        let f = cfg.width;
        let mut params = ParamSet::new();
        params.push_conv("reduce", f, cfg.in_channels(), 1, true, &mut r);
        for i in 0..scales.len() {
            params.push_conv(&format!("scale{i}.conv"), f, f, 3, true, &mut r);
        }
        for i in 0..scales.len().saturating_sub(1) {
            params.push_conv(&format!("merge{i}.conv"), f, 2 * f, 3, true, &mut r);
        }
        params.push_conv("head.conv", f, f, 3, true, &mut r);
        params.push_conv("head.cls", 2, f, 1, true, &mut r);
        debug_assert_eq!(params.count(), cfg.param_count(scales.len()));
        Ok(Self {
            cfg,
            grid,
            scales,
            params,
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> BoundFusion<'a> {
        BoundFusion {
            net: self,
            vars: self.params.bind(g, trainable),
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut m = serde_json::json!({
            "config": self.cfg,
            "grid": [self.grid.0, self.grid.1],
            "scales": self.scales,
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (m.as_object_mut(), meta) {
            obj.extend(extra);
        }
        Checkpoint {
            kind: "fusion".into(),
            meta: m,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "fusion" {
            return Err(Error::config("checkpoint", format!("expected a fusion network, found {}", ck.kind)));
        }
        let cfg: FusionConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let grid: (usize, usize) = serde_json::from_value(ck.meta["grid"].clone())?;
        let net = FusionNet::new(cfg, grid, 0)?;
        ck.params.ensure_compatible(&net.params)?;
        Ok(Self {
            params: ck.params.clone(),
            ..net
        })
    }
}

impl BoundFusion<'_> {
    fn conv(&self, g: &mut Graph, name: &str, x: Var, pad: usize) -> Result<Var> {
        let p = &self.net.params;
        let wi = p.index_of(&format!("{name}.weight")).expect("known layer");
        let bi = p.index_of(&format!("{name}.bias")).expect("known layer");
        g.conv2d(x, self.vars[wi], Some(self.vars[bi]), 1, pad)
    }

    /// Concatenate, reduce, and enrich across scales; returns `width×h×w`.
    pub fn enrich(&self, g: &mut Graph, prior: Var, support: Var, query: Var) -> Result<Var> {
        let cat = g.concat(&[prior, support, query])?;
        let (c, h, w) = g.value(cat).chw()?;
        if c != self.net.cfg.in_channels() {
            return Err(Error::Shape(format!(
                "fusion input has {c} channels, network expects {}",
                self.net.cfg.in_channels()
            )));
        }
        let reduced = self.conv(g, "reduce", cat, 0)?;
        let reduced = g.relu(reduced);
        let scales = &self.net.scales;
        let mut per_scale = Vec::with_capacity(scales.len());
        for (i, &s) in scales.iter().enumerate() {
            let down = g.resample(reduced, Arc::new(Resampler::new(h, w, s, s, ResizeMode::Area)))?;
            let x = self.conv(g, &format!("scale{i}.conv"), down, 1)?;
            per_scale.push(g.relu(x));
        }
        let mut coarse = *per_scale.last().expect("at least one scale");
        for i in (0..scales.len() - 1).rev() {
            let (s_from, s_to) = (scales[i + 1], scales[i]);
            let up = g.resample(
                coarse,
                Arc::new(Resampler::new(s_from, s_from, s_to, s_to, ResizeMode::Bilinear)),
            )?;
            let cat = g.concat(&[per_scale[i], up])?;
            let merged = self.conv(g, &format!("merge{i}.conv"), cat, 1)?;
            coarse = g.relu(merged);
        }
        let s0 = scales[0];
        g.resample(coarse, Arc::new(Resampler::new(s0, s0, h, w, ResizeMode::Bilinear)))
    }

    /// Prediction head: 3×3 conv, ReLU, linear 1×1 classifier to two channels.
    pub fn head(&self, g: &mut Graph, enriched: Var) -> Result<Var> {
        let x = self.conv(g, "head.conv", enriched, 1)?;
        let x = g.relu(x);
        self.conv(g, "head.cls", x, 0)
    }

    pub fn logits(&self, g: &mut Graph, prior: Var, support: Var, query: Var) -> Result<Var> {
        let e = self.enrich(g, prior, support, query)?;
        self.head(g, e)
    }
}

pub fn fuse_and_enrich(input: &FusionInput, net: &FusionNet) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let b = net.bind(&mut g, false);
    let p = g.constant(input.prior.data.clone());
    let s = g.constant(input.support_mid.data.clone());
    let q = g.constant(input.query_mid.data.clone());
    let e = b.enrich(&mut g, p, s, q)?;
    FeatureMap::new(g.value(e).clone(), Level::Mid, input.query_mid.stride)
}

pub fn predict_logits(enriched: &FeatureMap, net: &FusionNet) -> Result<Logits> {
    let mut g = Graph::new();
    let b = net.bind(&mut g, false);
    let e = g.constant(enriched.data.clone());
    let z = b.head(&mut g, e)?;
    Ok(Logits {
        data: g.value(z).clone(),
    })
}
