//! Parameter storage and per-step binding onto a tape.

use std::fmt;

use crate::error::{ensure, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of an input modality regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DomainId(pub usize);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a parameter belongs to. Gate parameters are tracked separately
/// so their gradients can be monitored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Gate,
    Norm,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    role: ParamRole,
    value: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, role, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.entries[id.0];
        ensure!(cur.value.shape() == value.shape(), "parameter {}: shape {:?} != {:?}", cur.name, value.shape(), cur.value.shape());
        cur.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.entries[id.0].role
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Initializers. `fan_in` is the number of inputs feeding one output.
pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut Xoshiro256) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn lecun_normal(shape: Vec<usize>, fan_in: usize, rng: &mut Xoshiro256) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Pending running-statistics update emitted by a normalization layer
/// during a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct NormUpdate {
    pub layer: usize,
    pub domain: DomainId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// State of one forward pass: the tape, lazily bound parameters, the
/// train/eval flag, optional noise source and pending statistics updates.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    pub rng: Option<Xoshiro256>,
    pub(crate) norm_updates: Vec<NormUpdate>,
}

impl<'p> Ctx<'p> {
    /// Training mode: parameters are differentiable leaves and normalization
    /// uses batch statistics.
    pub fn train(params: &'p ParamStore, rng: Option<Xoshiro256>) -> Self {
        Self::with_tape(params, Tape::new(), true, rng)
    }

    /// Evaluation mode without gradient recording.
    pub fn eval(params: &'p ParamStore) -> Self {
        Self::with_tape(params, Tape::inference(), false, None)
    }

    /// Evaluation-mode forward that still records gradients.
    pub fn eval_with_grad(params: &'p ParamStore) -> Self {
        Self::with_tape(params, Tape::new(), false, None)
    }

    pub fn with_tape(params: &'p ParamStore, tape: Tape, train: bool, rng: Option<Xoshiro256>) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
            train,
            rng,
            norm_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// The tape variable of a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Drains the statistics updates produced so far.
    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }

    /// Backpropagates `loss` and collects gradients for every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        Ok(self.collect(&grads))
    }

    pub fn collect(&self, grads: &Gradients) -> ParamGrads {
        let per = self
            .bound
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.and_then(|v| grads.get(v)).map(|g| {
                    Tensor::new(self.params.get(ParamId(i)).shape().to_vec(), g.to_vec()).expect("gradient shape matches parameter")
                })
            })
            .collect();
        ParamGrads(per)
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` for parameters that did
/// not take part in the loss.
#[derive(Debug, Clone)]
pub struct ParamGrads(Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest absolute gradient entry over parameters with the given role.
    pub fn max_abs_for_role(&self, store: &ParamStore, role: ParamRole) -> f64 {
        store
            .ids()
            .filter(|&id| store.role(id) == role)
            .filter_map(|id| self.get(id))
            .flat_map(|g| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }
}
