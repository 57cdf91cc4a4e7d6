//! Dense row-major `f64` tensors and separable spatial resampling.
//!
//! Most maps in this crate are `c×h×w`. Convolution kernels are 4-D
//! (`out×in×k×k`); everything else is 3-D.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(c, h, w)` of a 3-D tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a c×h×w tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Value at `(c, y, x)` of a 3-D tensor.
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate 3-D tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| Error::Shape("concatenating zero tensors".into()))?
            .chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {h}×{w} vs {ph}×{pw}"
                )));
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[c_total, h, w], data)
    }

    /// Multiply every channel by a `1×h×w` (or `h×w`) map.
    pub fn mul_spatial(&self, map: &[f64]) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if map.len() != h * w {
            return Err(Error::Shape(format!(
                "spatial map has {} cells, feature grid is {h}×{w}",
                map.len()
            )));
        }
        let mut out = self.clone();
        for ch in 0..c {
            for (v, m) in out.data[ch * h * w..(ch + 1) * h * w].iter_mut().zip(map) {
                *v *= m;
            }
        }
        Ok(out)
    }

    /// Apply a spatial resampler to every channel.
    pub fn resample(&self, r: &Resampler) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if (h, w) != (r.in_h, r.in_w) {
            return Err(Error::Shape(format!(
                "resampler expects {}×{}, got {h}×{w}",
                r.in_h, r.in_w
            )));
        }
        let mut out = Tensor::zeros(&[c, r.out_h, r.out_w]);
        for ch in 0..c {
            r.forward_plane(
                &self.data[ch * h * w..(ch + 1) * h * w],
                &mut out.data[ch * r.out_h * r.out_w..(ch + 1) * r.out_h * r.out_w],
            );
        }
        Ok(out)
    }

    pub fn resize(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor> {
        let (_, h, w) = self.chw()?;
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        self.resample(&Resampler::new(h, w, out_h, out_w, mode))
    }

    /// Cheap content checksum used to detect weight mutation.
    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.shape.hash(&mut hasher);
        for v in &self.data {
            v.to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// Half-pixel-centre bilinear interpolation.
    Bilinear,
    /// Average over the covered input area, with fractional edge weights.
    Area,
    Nearest,
}

/// A separable linear map from an `in_h×in_w` grid to an `out_h×out_w` grid.
///
/// Each output row (column) is a weighted sum of input rows (columns), so
/// the adjoint used in back-propagation is just the transposed taps.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize, mode: ResizeMode) -> Self {
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h, mode),
            cols: axis_taps(in_w, out_w, mode),
        }
    }

    pub fn forward_plane(&self, src: &[f64], dst: &mut [f64]) {
        // Rows first into a scratch of out_h×in_w, then columns.
        let mut tmp = vec![0.0; self.out_h * self.in_w];
        for (oy, taps) in self.rows.iter().enumerate() {
            let t = &mut tmp[oy * self.in_w..(oy + 1) * self.in_w];
            for &(iy, wy) in taps {
                for (tv, sv) in t.iter_mut().zip(&src[iy * self.in_w..(iy + 1) * self.in_w]) {
                    *tv += wy * sv;
                }
            }
        }
        for oy in 0..self.out_h {
            let t = &tmp[oy * self.in_w..(oy + 1) * self.in_w];
            for (ox, taps) in self.cols.iter().enumerate() {
                dst[oy * self.out_w + ox] = taps.iter().map(|&(ix, wx)| wx * t[ix]).sum();
            }
        }
    }

    /// Adjoint of [`Resampler::forward_plane`], accumulated into `dsrc`.
    pub fn backward_plane(&self, ddst: &[f64], dsrc: &mut [f64]) {
        let mut tmp = vec![0.0; self.out_h * self.in_w];
        for oy in 0..self.out_h {
            let t = &mut tmp[oy * self.in_w..(oy + 1) * self.in_w];
            for (ox, taps) in self.cols.iter().enumerate() {
                let g = ddst[oy * self.out_w + ox];
                for &(ix, wx) in taps {
                    t[ix] += wx * g;
                }
            }
        }
        for (oy, taps) in self.rows.iter().enumerate() {
            let t = &tmp[oy * self.in_w..(oy + 1) * self.in_w];
            for &(iy, wy) in taps {
                for (dv, tv) in dsrc[iy * self.in_w..(iy + 1) * self.in_w].iter_mut().zip(t) {
                    *dv += wy * tv;
                }
            }
        }
    }
}

fn axis_taps(n_in: usize, n_out: usize, mode: ResizeMode) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            ResizeMode::Nearest => {
                let i = ((o as f64 + 0.5) * scale).floor() as usize;
                vec![(i.min(n_in - 1), 1.0)]
            }
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            }
            ResizeMode::Area => {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_averages_blocks() {
        let t = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let d = t.resize(2, 2, ResizeMode::Area).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn area_weights_sum_to_one_for_fractional_ratio() {
        for taps in axis_taps(7, 3, ResizeMode::Area) {
            let s: f64 = taps.iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let t = Tensor::full(&[2, 3, 5], 0.7);
        let u = t.resize(8, 11, ResizeMode::Bilinear).unwrap();
        assert!(u.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let r = Resampler::new(5, 3, 2, 7, ResizeMode::Bilinear);
        let x: Vec<f64> = (0..15).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let g: Vec<f64> = (0..14).map(|i| ((i * 3) % 4) as f64 * 0.5).collect();
        let mut y = vec![0.0; 14];
        r.forward_plane(&x, &mut y);
        let mut gx = vec![0.0; 15];
        r.backward_plane(&g, &mut gx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let t = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let u = t.resize(1, 4, ResizeMode::Nearest).unwrap();
        assert_eq!(u.data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
