use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.tracked());
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform matrix, `s = √(6/(fan_in+fan_out))`.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        self.insert(name, glorot(rows, cols, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Excludes the tensor from gradient updates.
    pub fn freeze(&mut self, id: ParamId) {
        self.tensors[id.0].set_requires_grad(false);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        !self.tensors[id.0].requires_grad()
    }

    /// Records the parameter on `tape`, once per tape.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, &self.tensors[id.0])
    }

    /// Writes gradients for every parameter bound on `tape`; unbound or
    /// frozen parameters get no gradient, bound ones that did not reach the
    /// loss get zeros.
    pub fn absorb_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for t in &mut self.tensors {
            t.zero_grad();
        }
        for (key, var) in tape.bound_params() {
            let t = &mut self.tensors[key];
            if t.requires_grad() {
                grads.write_into(var, t)?;
            }
        }
        Ok(())
    }

    /// Replaces parameter values with those of `other` (same names, same shapes).
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint("parameter shapes differ".into()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect();
    Tensor::from_parts(rows, cols, data)
}

/// All-ones plus `noise · N(0,1)` per entry.
pub fn ones_with_noise<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    noise: f64,
    rng: &mut R,
) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            1.0 + noise * z
        })
        .collect();
    Tensor::from_parts(rows, cols, data)
}
