//! Trainable parameters, addressed by stable string paths.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// All weights of a model, keyed by path (e.g. `"clip.l0.k2.ffn.w1"`).
/// Iteration order is the lexicographic path order, which keeps
/// optimizer updates and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.entries.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }
}

/// Seeded initializer drawing in call order, so layout changes are the
/// only thing that can shift initial weights.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Affine weight: symmetric uniform scaled by `1/sqrt(fan_in)`.
    pub fn affine(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::matrix(fan_in, fan_out, data).expect("sized by construction")
    }

    /// Small-variance normal, used for pooling vectors and positional
    /// tables.
    pub fn normal(&mut self, rows: usize, cols: usize, std_dev: f64) -> Tensor {
        let dist = Normal::new(0.0, std_dev).expect("valid std dev");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::matrix(rows, cols, data).expect("sized by construction")
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::zeros(rows, cols)
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::full(rows, cols, 1.0)
    }
}

/// Binds a [`ParamSet`] onto a [`Tape`], one differentiable leaf per
/// path regardless of how many times it is fetched.
pub struct TapeParams<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 'p> TapeParams<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Self {
            tape,
            params,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(path) {
            return Ok(*v);
        }
        let tensor = self.params.get(path)?.clone();
        let var = self.tape.leaf(tensor, true);
        self.bound.borrow_mut().insert(path.to_string(), var);
        Ok(var)
    }

    /// Collects per-path gradients after a backward pass; every bound
    /// parameter appears, with zeros when it did not reach the output.
    pub fn collect_gradients(&self, grads: &crate::tensor::Gradients<'t>) -> GradSet {
        let mut out = BTreeMap::new();
        for (path, var) in self.bound.borrow().iter() {
            out.insert(path.clone(), grads.get(*var));
        }
        GradSet { entries: out }
    }

    /// The (path, tape node id) of every bound parameter, for gradient
    /// collection once the binding itself has been dropped.
    pub fn binding_ids(&self) -> Vec<(String, usize)> {
        self.bound
            .borrow()
            .iter()
            .map(|(path, var)| (path.clone(), var.id()))
            .collect()
    }
}

/// Gradients keyed like the [`ParamSet`] they refer to.
#[derive(Clone, Debug, Default)]
pub struct GradSet {
    entries: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.entries.insert(path.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    /// Adds `grad` into the entry at `path`, which must exist.
    pub fn accumulate(&mut self, path: &str, grad: &Tensor) -> Result<()> {
        match self.entries.get_mut(path) {
            Some(g) => g.add_assign(grad),
            None => Err(Error::UnknownParameter(path.to_string())),
        }
    }

    /// Accumulates `other` into `self` entry-wise.
    pub fn merge(&mut self, other: &GradSet) -> Result<()> {
        for (path, grad) in &other.entries {
            match self.entries.get_mut(path) {
                Some(g) => g.add_assign(grad)?,
                None => {
                    self.entries.insert(path.clone(), grad.clone());
                }
            }
        }
        Ok(())
    }

    /// Global L2 norm across all entries.
    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            g.scale_in_place(factor);
        }
    }
}
