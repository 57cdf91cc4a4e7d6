//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse index order is a valid topological order for
//! back-propagation. Everything runs in `f64`, which is what finite-difference
//! gradient checks want.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Resampler, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Additive stabiliser of the min-max normalisation.
pub const MINMAX_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    Concat(Vec<usize>),
    Resample(usize, Arc<Resampler>),
    Mul(usize, usize),
    SoftmaxBinary(usize),
    MinMaxNorm {
        x: usize,
        argmin: Option<usize>,
        argmax: Option<usize>,
    },
    BceLogits {
        z: usize,
        target: Vec<f64>,
    },
    Mean(Vec<usize>),
    GlobalAvgPool(usize),
    SoftmaxCe {
        z: usize,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (c, h, wd) = xv.chw()?;
        let [oc, ic, k, k2] = wv.shape()[..] else {
            return Err(Error::Shape(format!("conv weight {:?} is not 4-D", wv.shape())));
        };
        if ic != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not fit a {c}-channel input",
                wv.shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("{h}×{wd} input is smaller than a {k}×{k} kernel")));
        }
        let geo = ConvGeometry::new(c, h, wd, k, stride, pad);
        let cols = geo.im2col(xv.data());
        let n = geo.oh * geo.ow;
        let j = c * k * k;
        let mut out = vec![0.0; oc * n];
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            for (o, row) in out.chunks_mut(n).enumerate() {
                row.fill(bv[o]);
            }
        }
        // SAFETY: all buffers are sized to the gemm dimensions above.
        unsafe {
            matrixmultiply::dgemm(
                oc,
                j,
                n,
                1.0,
                wv.data().as_ptr(),
                j as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let value = Tensor::new(&[oc, geo.oh, geo.ow], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            value,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.max(0.0));
        let rg = self.rg(x.0);
        self.push(v, Op::Relu(x.0), rg)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|v| &self.nodes[v.0].value).collect();
        let v = Tensor::concat_channels(&parts)?;
        let rg = xs.iter().any(|x| self.rg(x.0));
        Ok(self.push(v, Op::Concat(xs.iter().map(|x| x.0).collect()), rg))
    }

    pub fn resample(&mut self, x: Var, r: Arc<Resampler>) -> Result<Var> {
        let (_, h, w) = self.nodes[x.0].value.chw()?;
        if (h, w) == (r.out_h, r.out_w) && (r.in_h, r.in_w) == (h, w) {
            return Ok(x);
        }
        let v = self.nodes[x.0].value.resample(&r)?;
        let rg = self.rg(x.0);
        Ok(self.push(v, Op::Resample(x.0, r), rg))
    }

    /// Element-wise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "elementwise product of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    /// Channel-1 probability of a two-way softmax over `2×h×w` logits.
    pub fn softmax_binary(&mut self, z: Var) -> Result<Var> {
        let zv = &self.nodes[z.0].value;
        let (c, h, w) = zv.chw()?;
        if c != 2 {
            return Err(Error::Shape(format!("binary softmax needs 2 channels, got {c}")));
        }
        let (z0, z1) = zv.data().split_at(h * w);
        let data = z0.iter().zip(z1).map(|(&a, &b)| sigmoid(b - a)).collect();
        let v = Tensor::new(&[1, h, w], data)?;
        let rg = self.rg(z.0);
        Ok(self.push(v, Op::SoftmaxBinary(z.0), rg))
    }

    /// `(x - min x) / (max x - min x + 1e-7)` over the whole tensor.
    ///
    /// The bounds receive gradient through their arg-extremum only when it is
    /// unique; ties get a zero subgradient.
    pub fn minmax_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (v, argmin, argmax) = minmax_forward(xv);
        let rg = self.rg(x.0);
        self.push(v, Op::MinMaxNorm { x: x.0, argmin, argmax }, rg)
    }

    /// Mean binary cross-entropy of a `2×h×w` logit map against a `{0,1}` target.
    pub fn bce_logits(&mut self, z: Var, target: &[f64]) -> Result<Var> {
        let zv = &self.nodes[z.0].value;
        let (c, h, w) = zv.chw()?;
        if c != 2 || target.len() != h * w {
            return Err(Error::Shape(format!(
                "cross-entropy of {:?} logits against {} targets",
                zv.shape(),
                target.len()
            )));
        }
        let (z0, z1) = zv.data().split_at(h * w);
        let total: f64 = z0
            .iter()
            .zip(z1)
            .zip(target)
            .map(|((&a, &b), &y)| {
                let d = b - a;
                y * softplus(-d) + (1.0 - y) * softplus(d)
            })
            .sum();
        let v = Tensor::new(&[1], vec![total / (h * w) as f64])?;
        let rg = self.rg(z.0);
        Ok(self.push(
            v,
            Op::BceLogits {
                z: z.0,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Average of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Empty("mean of zero terms"));
        }
        let mut s = 0.0;
        for x in xs {
            let t = &self.nodes[x.0].value;
            if t.len() != 1 {
                return Err(Error::Shape(format!("mean expects scalars, got {:?}", t.shape())));
            }
            s += t.data()[0];
        }
        let v = Tensor::new(&[1], vec![s / xs.len() as f64])?;
        let rg = xs.iter().any(|x| self.rg(x.0));
        Ok(self.push(v, Op::Mean(xs.iter().map(|x| x.0).collect()), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = xv.chw()?;
        let data = (0..c)
            .map(|ch| xv.channel(ch).iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let v = Tensor::new(&[c, 1, 1], data)?;
        let rg = self.rg(x.0);
        Ok(self.push(v, Op::GlobalAvgPool(x.0), rg))
    }

    /// Multi-class softmax cross-entropy of a `c×1×1` logit vector.
    pub fn softmax_ce(&mut self, z: Var, label: usize) -> Result<Var> {
        let zv = self.nodes[z.0].value.data();
        if label >= zv.len() {
            return Err(Error::Shape(format!("label {label} out of {} classes", zv.len())));
        }
        let lse = log_sum_exp(zv);
        let v = Tensor::new(&[1], vec![lse - zv[label]])?;
        let rg = self.rg(z.0);
        Ok(self.push(v, Op::SoftmaxCe { z: z.0, label }, rg))
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward from a non-scalar node".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], to: usize, g: Tensor) {
        if !self.nodes[to].requires_grad {
            return;
        }
        match &mut grads[to] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { x, w, b, stride, pad } => {
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                let (c, h, wd) = xv.chw()?;
                let (oc, k) = (wv.shape()[0], wv.shape()[2]);
                let geo = ConvGeometry::new(c, h, wd, k, stride, pad);
                let n = geo.oh * geo.ow;
                let j = c * k * k;
                let gy = g.data();
                if let Some(b) = b {
                    let db = (0..oc).map(|o| gy[o * n..(o + 1) * n].iter().sum()).collect();
                    self.accumulate(grads, b, Tensor::new(&[oc], db)?);
                }
                if self.rg(w) {
                    let cols = geo.im2col(xv.data());
                    let mut dw = vec![0.0; oc * j];
                    // SAFETY: dW (oc×j) = dY (oc×n) · colsᵀ (n×j).
                    unsafe {
                        matrixmultiply::dgemm(
                            oc,
                            n,
                            j,
                            1.0,
                            gy.as_ptr(),
                            n as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            n as isize,
                            0.0,
                            dw.as_mut_ptr(),
                            j as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; j * n];
                    // SAFETY: dcols (j×n) = Wᵀ (j×oc) · dY (oc×n).
                    unsafe {
                        matrixmultiply::dgemm(
                            j,
                            oc,
                            n,
                            1.0,
                            wv.data().as_ptr(),
                            1,
                            j as isize,
                            gy.as_ptr(),
                            n as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    let dx = geo.col2im(&dcols);
                    self.accumulate(grads, x, Tensor::new(&[c, h, wd], dx)?);
                }
            }
            &Op::Relu(x) => {
                let xv = self.nodes[x].value.data();
                let d = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, Tensor::new(g.shape(), d)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.nodes[p].value.shape().to_vec();
                    let n = self.nodes[p].value.len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    self.accumulate(grads, p, Tensor::new(&shape, slice)?);
                }
            }
            Op::Resample(x, r) => {
                let (c, h, w) = self.nodes[*x].value.chw()?;
                let mut dx = vec![0.0; c * h * w];
                let plane_out = r.out_h * r.out_w;
                for ch in 0..c {
                    r.backward_plane(
                        &g.data()[ch * plane_out..(ch + 1) * plane_out],
                        &mut dx[ch * h * w..(ch + 1) * h * w],
                    );
                }
                self.accumulate(grads, *x, Tensor::new(&[c, h, w], dx)?);
            }
            &Op::Mul(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, a, Tensor::new(av.shape(), ga)?);
                self.accumulate(grads, b, Tensor::new(bv.shape(), gb)?);
            }
            &Op::SoftmaxBinary(z) => {
                let p = node.value.data();
                let hw = p.len();
                let zshape = self.nodes[z].value.shape().to_vec();
                let mut dz = vec![0.0; 2 * hw];
                for i in 0..hw {
                    let d = g.data()[i] * p[i] * (1.0 - p[i]);
                    dz[i] = -d;
                    dz[hw + i] = d;
                }
                self.accumulate(grads, z, Tensor::new(&zshape, dz)?);
            }
            &Op::MinMaxNorm { x, argmin, argmax } => {
                let xv = &self.nodes[x].value;
                let (mn, mx) = (xv.min(), xv.max());
                let denom = mx - mn + MINMAX_EPS;
                let mut dx: Vec<f64> = g.data().iter().map(|gi| gi / denom).collect();
                let mut gmin = 0.0;
                let mut gmax = 0.0;
                for (gi, xi) in g.data().iter().zip(xv.data()) {
                    let rel = xi - mn;
                    gmin += gi * (-1.0 / denom + rel / (denom * denom));
                    gmax -= gi * rel / (denom * denom);
                }
                if let Some(i) = argmin {
                    dx[i] += gmin;
                }
                if let Some(i) = argmax {
                    dx[i] += gmax;
                }
                self.accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
            }
            Op::BceLogits { z, target } => {
                let zv = &self.nodes[*z].value;
                let hw = target.len();
                let scale = g.data()[0] / hw as f64;
                let (z0, z1) = zv.data().split_at(hw);
                let mut dz = vec![0.0; 2 * hw];
                for i in 0..hw {
                    let d = (sigmoid(z1[i] - z0[i]) - target[i]) * scale;
                    dz[i] = -d;
                    dz[hw + i] = d;
                }
                self.accumulate(grads, *z, Tensor::new(zv.shape(), dz)?);
            }
            Op::Mean(xs) => {
                let gi = g.data()[0] / xs.len() as f64;
                for &x in xs {
                    self.accumulate(grads, x, Tensor::full(&[1], gi));
                }
            }
            &Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.nodes[x].value.chw()?;
                let inv = 1.0 / (h * w) as f64;
                let dx = Tensor::from_fn(&[c, h, w], |i| g.data()[i / (h * w)] * inv);
                self.accumulate(grads, x, dx);
            }
            &Op::SoftmaxCe { z, label } => {
                let zv = &self.nodes[z].value;
                let lse = log_sum_exp(zv.data());
                let gl = g.data()[0];
                let mut dz: Vec<f64> = zv.data().iter().map(|v| (v - lse).exp() * gl).collect();
                dz[label] -= gl;
                self.accumulate(grads, z, Tensor::new(zv.shape(), dz)?);
            }
        }
        Ok(())
    }
}

/// Logistic function, evaluated so that `sigmoid(d) + sigmoid(-d) == 1` holds exactly.
pub fn sigmoid(d: f64) -> f64 {
    let e = (-d.abs()).exp();
    let small = e / (1.0 + e);
    if d >= 0.0 {
        1.0 - small
    } else {
        small
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Min-max normalisation shared by the graph op and the tensor-level helpers.
pub(crate) fn minmax_forward(x: &Tensor) -> (Tensor, Option<usize>, Option<usize>) {
    let (mn, mx) = (x.min(), x.max());
    let denom = mx - mn + MINMAX_EPS;
    let unique = |target: f64| {
        let mut hits = x.data().iter().enumerate().filter(|(_, &v)| v == target);
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    };
    let out = x.map(|v| (v - mn) / denom);
    (out, unique(mn), unique(mx))
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    /// Visit `(column-row, output-cell, input-index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * n, oy * self.ow + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut cols = vec![0.0; self.c * self.k * self.k * n];
        self.for_each_tap(|r, o, i| cols[r + o] = x[i]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.c * self.h * self.w];
        self.for_each_tap(|r, o, i| x[i] += cols[r + o]);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct convolution, independent of im2col/gemm.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.chw().unwrap();
        let (oc, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn(&[oc, oh, ow], |idx| {
            let o = idx / (oh * ow);
            let (oy, ox) = ((idx / ow) % oh, idx % ow);
            let mut s = b[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += w.data()[((o * c + ci) * k + ky) * k + kx]
                                * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = random(&[3, 7, 6], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let expect = naive_conv(&x, &w, b.data(), stride, pad);
            assert_eq!(g.value(y).shape(), expect.shape());
            for (a, e) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    /// Central finite differences on every input of a small composite graph.
    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[3, 5, 5], &mut rng);
        let w1 = random(&[4, 3, 3, 3], &mut rng);
        let b1 = random(&[4], &mut rng);
        let w2 = random(&[2, 5, 1, 1], &mut rng);
        let prior = Tensor::from_fn(&[1, 3, 3], |i| 0.1 * i as f64);
        let target: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();

        let loss = |params: &[Tensor], g: &mut Graph| -> (Var, Vec<Var>) {
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let h = g.conv2d(vars[0], vars[1], Some(vars[2]), 2, 1).unwrap();
            let h = g.relu(h);
            let pr = g.constant(prior.clone());
            let r = Arc::new(Resampler::new(3, 3, 3, 3, crate::tensor::ResizeMode::Bilinear));
            let h = g.resample(h, r).unwrap();
            let cat = g.concat(&[pr, h]).unwrap();
            let z = g.conv2d(cat, vars[3], None, 1, 0).unwrap();
            let p = g.softmax_binary(z).unwrap();
            let q = g.mul(p, pr).unwrap();
            let q = g.minmax_norm(q);
            let cat2 = g.concat(&[q, h]).unwrap();
            let z2 = g.conv2d(cat2, vars[3], None, 1, 0).unwrap();
            let l1 = g.bce_logits(z, &target).unwrap();
            let l2 = g.bce_logits(z2, &target).unwrap();
            (g.mean(&[l1, l2]).unwrap(), vars)
        };

        let params = vec![x, w1, b1, w2];
        let mut g = Graph::new();
        let (l, vars) = loss(&params, &mut g);
        g.backward(l).unwrap();
        let eps = 1e-6;
        for (pi, var) in vars.iter().enumerate() {
            let analytic = g.grad(*var).unwrap().clone();
            for i in (0..params[pi].len()).step_by(3) {
                let mut plus = params.clone();
                plus[pi].data_mut()[i] += eps;
                let mut minus = params.clone();
                minus[pi].data_mut()[i] -= eps;
                let mut gp = Graph::new();
                let lp = loss(&plus, &mut gp).0;
                let mut gm = Graph::new();
                let lm = loss(&minus, &mut gm).0;
                let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "param {pi}[{i}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn softmax_ce_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(Tensor::new(&[3, 1, 1], vec![1.0, 2.0, 0.5]).unwrap());
        let gp = g.global_avg_pool(z).unwrap();
        let l = g.softmax_ce(gp, 1).unwrap();
        g.backward(l).unwrap();
        let s: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        let expect = [1f64.exp() / s, 2f64.exp() / s - 1.0, 0.5f64.exp() / s];
        for (a, e) in g.grad(z).unwrap().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[1, 1, 2], 0.3));
        let d = g.detach(a);
        let z = g.concat(&[a, d]).unwrap();
        let l = g.bce_logits(z, &[1.0, 0.0]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn sigmoid_complement_is_exact() {
        for d in [-40.0, -3.3, -1e-9, 0.0, 1e-9, 0.7, 20.0, 800.0] {
            assert_eq!(sigmoid(d) + sigmoid(-d), 1.0);
        }
    }
}
