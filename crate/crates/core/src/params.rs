//! Named parameter tensors shared by the backbone and fusion networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    /// He-normal conv kernel `out×in×k×k` plus a zero bias.
    pub fn push_conv(
        &mut self,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[out_c, in_c, k, k], |_| normal.sample(rng));
        self.push(format!("{name}.weight"), w);
        if bias {
            self.push(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (n, t) in self.iter() {
            n.hash(&mut h);
            t.checksum().hash(&mut h);
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Place every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Collect gradients of bound parameters, zero where none flowed.
    pub fn grads_from(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        self.tensors()
            .zip(vars)
            .map(|(t, v)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Check names and shapes against another set (e.g. a freshly built model).
    pub fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Shape(format!(
                    "parameter {a}{:?} vs {b}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Add `other` element-wise (gradient accumulation across a batch).
pub fn accumulate(into: &mut [Tensor], other: &[Tensor]) {
    for (a, b) in into.iter_mut().zip(other) {
        a.add_assign(b);
    }
}
