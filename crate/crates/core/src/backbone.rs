//! Desk-scale convolutional backbone and support-feature masking.
//!
//! Four stages, each a strided 3×3 conv followed by a 3×3 conv, both with
//! ReLU. Mid-level features are the channel concatenation of the designated
//! mid stages, resized (bilinear) to the shallowest of them; high-level
//! features are the output of the designated high stage.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::episodes::Mask;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::rng::{self, tag};
use crate::tensor::{Resampler, ResizeMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Mid,
    High,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub level: Level,
    /// Input pixels per feature cell.
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, level: Level, stride: usize) -> Result<Self> {
        let (_, h, w) = data.chw()?;
        if h == 0 || w == 0 {
            return Err(Error::Shape("feature grid must be non-empty".into()));
        }
        Ok(Self {
            data,
            level,
            stride,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// Bilinear resize to `h×w`; the stride is rescaled accordingly.
    pub fn resized(&self, h: usize, w: usize) -> Result<FeatureMap> {
        let (fh, _) = self.hw();
        let stride = (self.stride * fh).div_ceil(h).max(1);
        FeatureMap::new(self.data.resize(h, w, ResizeMode::Bilinear)?, self.level, stride)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Stage indices (0-based) whose outputs form the mid-level features.
    pub mid_stages: Vec<usize>,
    pub high_stage: usize,
    pub bias: bool,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 24, 32, 48],
            strides: vec![2, 2, 2, 1],
            mid_stages: vec![1, 2],
            high_stage: 3,
            bias: true,
            frozen: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("backbone.widths", "must be non-empty and positive"));
        }
        if self.strides.len() != self.widths.len() || self.strides.iter().any(|&s| s == 0) {
            return Err(Error::config(
                "backbone.strides",
                "must be positive with one entry per stage",
            ));
        }
        if self.high_stage >= self.widths.len() {
            return Err(Error::config("backbone.high_stage", "must name an existing stage"));
        }
        if self.mid_stages.is_empty() || self.mid_stages.iter().any(|&m| m >= self.high_stage) {
            return Err(Error::config(
                "backbone.mid_stages",
                "must be non-empty and shallower than high_stage",
            ));
        }
        Ok(())
    }

    pub fn mid_channels(&self) -> usize {
        self.mid_stages.iter().map(|&s| self.widths[s]).sum()
    }

    pub fn high_channels(&self) -> usize {
        self.widths[self.high_stage]
    }

    /// Cumulative stride after each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    pub fn min_input(&self) -> usize {
        self.stage_strides()[self.high_stage]
    }

    /// Feature grid sizes `(mid, high)` for a square input of side `size`.
    pub fn grid_sizes(&self, size: usize) -> (usize, usize) {
        let mut sizes = Vec::new();
        let mut s = size;
        for &st in &self.strides {
            s = (s - 1) / st + 1;
            sizes.push(s);
        }
        let shallowest = *self.mid_stages.iter().min().expect("validated");
        (sizes[shallowest], sizes[self.high_stage])
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        crate::fingerprint(json.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamSet,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[tag::BACKBONE]);
        let mut params = ParamSet::new();
        let mut in_c = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            params.push_conv(&format!("stage{i}.down"), w, in_c, 3, cfg.bias, &mut r);
            params.push_conv(&format!("stage{i}.conv"), w, w, 3, cfg.bias, &mut r);
            in_c = w;
        }
        Ok(Self { cfg, params })
    }

    /// Stage outputs up to and including the high stage, recorded on `g`.
    pub fn forward_stages(&self, g: &mut Graph, vars: &[Var], image: Var) -> Result<Vec<Var>> {
        let per = if self.cfg.bias { 4 } else { 2 };
        let mut x = image;
        let mut outs = Vec::new();
        for (i, &stride) in self.cfg.strides.iter().enumerate().take(self.cfg.high_stage + 1) {
            let p = &vars[i * per..(i + 1) * per];
            let (b0, w1, b1) = if self.cfg.bias {
                (Some(p[1]), p[2], Some(p[3]))
            } else {
                (None, p[1], None)
            };
            x = g.conv2d(x, p[0], b0, stride, 1)?;
            x = g.relu(x);
            x = g.conv2d(x, w1, b1, 1, 1)?;
            x = g.relu(x);
            outs.push(x);
        }
        Ok(outs)
    }

    /// Mid-level concatenation recorded on `g` from stage outputs.
    fn mid_from_stages(&self, g: &mut Graph, stages: &[Var]) -> Result<Var> {
        let shallowest = *self.cfg.mid_stages.iter().min().expect("validated");
        let (_, h, w) = g.value(stages[shallowest]).chw()?;
        let mut parts = Vec::new();
        for &s in &self.cfg.mid_stages {
            let (_, sh, sw) = g.value(stages[s]).chw()?;
            let r = Arc::new(Resampler::new(sh, sw, h, w, ResizeMode::Bilinear));
            parts.push(g.resample(stages[s], r)?);
        }
        g.concat(&parts)
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<(FeatureMap, FeatureMap)> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("backbone input has {c} channels")));
        }
        let min = self.cfg.min_input();
        if h < min || w < min {
            return Err(Error::ImageTooSmall { h, w, min });
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let stages = self.forward_stages(&mut g, &vars, x)?;
        let mid = self.mid_from_stages(&mut g, &stages)?;
        let strides = self.cfg.stage_strides();
        let shallowest = *self.cfg.mid_stages.iter().min().expect("validated");
        let f_m = FeatureMap::new(g.value(mid).clone(), Level::Mid, strides[shallowest])?;
        let f_h = FeatureMap::new(
            g.value(stages[self.cfg.high_stage]).clone(),
            Level::High,
            strides[self.cfg.high_stage],
        )?;
        Ok((f_m, f_h))
    }

    /// Per-image extraction over a batch.
    pub fn extract_batch(&self, images: &[&Tensor]) -> Result<Vec<(FeatureMap, FeatureMap)>> {
        images.iter().map(|im| self.extract_features(im)).collect()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut m = serde_json::json!({ "config": self.cfg });
        if let (Some(obj), serde_json::Value::Object(extra)) = (m.as_object_mut(), meta) {
            obj.extend(extra);
        }
        Checkpoint {
            kind: "backbone".into(),
            meta: m,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "backbone" {
            return Err(Error::config("checkpoint", format!("expected a backbone, found {}", ck.kind)));
        }
        let cfg: BackboneConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let fresh = Backbone::new(cfg.clone(), 0)?;
        ck.params.ensure_compatible(&fresh.params)?;
        Ok(Self {
            cfg,
            params: ck.params.clone(),
        })
    }
}

/// `f ⊙ y`: the mask is area-averaged onto the feature grid and multiplied
/// into every channel without re-thresholding.
pub fn mask_features(f: &FeatureMap, y: &Mask) -> Result<FeatureMap> {
    let (h, w) = f.hw();
    let soft = y.resize_area(h, w);
    mask_features_soft(f, &soft)
}

/// Masking with a mask already on the feature grid.
pub fn mask_features_soft(f: &FeatureMap, soft: &[f64]) -> Result<FeatureMap> {
    Ok(FeatureMap {
        data: f.data.mul_spatial(soft)?,
        level: f.level,
        stride: f.stride,
    })
}

// Feature container: 24-byte header then row-major f32 LE data.
const FEAT_MAGIC: &[u8; 4] = b"PCFM";
const FEAT_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const LITTLE_ENDIAN: u8 = 0;

pub fn encode_feature_map(f: &FeatureMap) -> Vec<u8> {
    let (c, h, w) = f.data.chw().expect("3-D feature map");
    let mut out = Vec::with_capacity(24 + 4 * c * h * w);
    out.extend_from_slice(FEAT_MAGIC);
    out.push(FEAT_VERSION);
    out.push(match f.level {
        Level::Mid => 0,
        Level::High => 1,
    });
    out.push(DTYPE_F32);
    out.push(LITTLE_ENDIAN);
    for v in [c, h, w, f.stride] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in f.data.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 24 || &bytes[..4] != FEAT_MAGIC {
        return Err(bad("missing feature-map magic"));
    }
    if bytes[4] != FEAT_VERSION {
        return Err(bad("unsupported feature-map version"));
    }
    let level = match bytes[5] {
        0 => Level::Mid,
        1 => Level::High,
        _ => return Err(bad("unknown level code")),
    };
    if bytes[6] != DTYPE_F32 || bytes[7] != LITTLE_ENDIAN {
        return Err(bad("only little-endian float32 is supported"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w, stride) = (u(0), u(1), u(2), u(3));
    let payload = &bytes[24..];
    if payload.len() != 4 * c * h * w {
        return Err(bad("payload length does not match header"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::new(Tensor::new(&[c, h, w], data)?, level, stride)
}

pub fn save_feature_map(f: &FeatureMap, path: &Path) -> Result<()> {
    fs::write(path, encode_feature_map(f)).map_err(|e| Error::io(path, e))
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_map(&bytes, path)
}
