//! Similarity prior from high-level features.
//!
//! For every query cell the prior takes the best cosine match among the
//! masked support cells, then rescales the whole map to `[0,1)` with a
//! min-max normalisation. Zero-norm cells (masked-out support, dead query
//! activations) have similarity 0 with everything.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::MINMAX_EPS;
use crate::tensor::{ResizeMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbKind {
    Prior,
    Estimate,
    Augmented,
}

/// A `1×h×w` map with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub data: Tensor,
    pub kind: ProbKind,
}

impl ProbMap {
    pub fn new(data: Tensor, kind: ProbKind) -> Result<Self> {
        let (c, _, _) = data.chw()?;
        if c != 1 {
            return Err(Error::Shape(format!("probability map has {c} channels")));
        }
        debug_assert!(
            data.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "probability map outside [0,1]"
        );
        Ok(Self { data, kind })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }

    pub fn in_unit_range(&self) -> bool {
        self.values().iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn resized(&self, h: usize, w: usize) -> Result<ProbMap> {
        Ok(ProbMap {
            data: self.data.resize(h, w, ResizeMode::Bilinear)?,
            kind: self.kind,
        })
    }
}

/// Row-major `hw_q × hw_s` cosine similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Unit-normalise each pixel vector, laid out `hw × c` (pixel-major).
fn normalized_pixels(f: &Tensor) -> Vec<f64> {
    let (c, h, w) = f.chw().expect("3-D");
    let hw = h * w;
    let mut out = vec![0.0; hw * c];
    for p in 0..hw {
        let norm = (0..c).map(|ch| f.data()[ch * hw + p].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for ch in 0..c {
                out[p * c + ch] = f.data()[ch * hw + p] / norm;
            }
        }
    }
    out
}

/// Cosine similarity between every query cell and every support cell.
pub fn pairwise_cosine(f_hq: &FeatureMap, f_hs_masked: &FeatureMap) -> Result<SimilarityMatrix> {
    let (c, h, w) = f_hq.data.chw()?;
    let (cs, hs, ws) = f_hs_masked.data.chw()?;
    if c != cs {
        return Err(Error::Shape(format!(
            "query has {c} channels, support has {cs}"
        )));
    }
    if (h, w) != (hs, ws) {
        return Err(Error::Shape(format!(
            "query grid {h}×{w} vs support grid {hs}×{ws}"
        )));
    }
    let (rows, cols) = (h * w, hs * ws);
    let q = normalized_pixels(&f_hq.data);
    let s = normalized_pixels(&f_hs_masked.data);
    let mut data = vec![0.0; rows * cols];
    // SAFETY: q is rows×c, s is cols×c (read transposed as c×cols), data is rows×cols.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            c,
            cols,
            1.0,
            q.as_ptr(),
            c as isize,
            1,
            s.as_ptr(),
            1,
            c as isize,
            0.0,
            data.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(SimilarityMatrix { rows, cols, data })
}

/// Best match per query cell, reshaped to `1×h×w`.
pub fn max_over_support(sim: &SimilarityMatrix, h: usize, w: usize) -> Result<Tensor> {
    if sim.rows != h * w {
        return Err(Error::Shape(format!(
            "{} rows cannot be reshaped to {h}×{w}",
            sim.rows
        )));
    }
    let data = sim
        .data
        .chunks(sim.cols)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// `(v − min v) / (max v − min v + 1e−7)` over the whole map.
pub fn minmax_normalize(v: &Tensor) -> Tensor {
    let (mn, mx) = (v.min(), v.max());
    let denom = mx - mn + MINMAX_EPS;
    v.map(|x| (x - mn) / denom)
}

/// Prior for one query/support pair. The support grid is resized to the
/// query grid first when they differ.
pub fn generate_prior(f_hq: &FeatureMap, f_hs_masked: &FeatureMap) -> Result<ProbMap> {
    let (h, w) = f_hq.hw();
    let support = if f_hs_masked.hw() != (h, w) {
        f_hs_masked.resized(h, w)?
    } else {
        f_hs_masked.clone()
    };
    let sim = pairwise_cosine(f_hq, &support)?;
    debug_assert!(sim.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    let v = max_over_support(&sim, h, w)?;
    ProbMap::new(minmax_normalize(&v), ProbKind::Prior)
}
