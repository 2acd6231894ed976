use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Learnable tensors plus non-learnable buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    buffers: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> BufferId {
        self.buffers.push(Param { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<F> {
        &self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param<F>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param<F>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound<'_, F> {
        let vars = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        Bound { store: self, vars }
    }

    /// Places every parameter on `tape` as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Bound<'_, F> {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bound { store: self, vars }
    }

    /// Uses caller-provided variables in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_, F>> {
        if vars.len() != self.params.len() {
            return Err(Error::shape("bind_vars", self.params.len(), vars.len()));
        }
        Ok(Bound { store: self, vars })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: Vec<(BufferId, BufferId, BatchStats<F>)>, momentum: F) {
        for (mean_id, var_id, stats) in updates {
            for (r, &b) in self.buffers[mean_id.0].value.data_mut().iter_mut().zip(&stats.mean) {
                *r = (F::one() - momentum) * *r + momentum * b;
            }
            for (r, &b) in self.buffers[var_id.0].value.data_mut().iter_mut().zip(&stats.var) {
                *r = (F::one() - momentum) * *r + momentum * b;
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let conv = |p: &Param<F>| Param {
            name: p.name.clone(),
            value: p.value.cast(),
        };
        ParamStore {
            params: self.params.iter().map(conv).collect(),
            buffers: self.buffers.iter().map(conv).collect(),
        }
    }
}

/// Parameters bound to one tape.
pub struct Bound<'a, F> {
    store: &'a ParamStore<F>,
    vars: Vec<Var>,
}

impl<F: Scalar> Bound<'_, F> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<F> {
        self.store.buffer(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, randomness for attention dropout, and batch-norm updates to apply.
pub struct Ctx<F> {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    /// Attention dropout rate, used in train mode only.
    pub attention_drop: f64,
    pub bn_updates: Vec<(BufferId, BufferId, BatchStats<F>)>,
}

impl<F: Scalar> Ctx<F> {
    pub fn new(mode: Mode, rng: ChaCha8Rng) -> Self {
        Ctx {
            mode,
            rng,
            attention_drop: 0.0,
            bn_updates: Vec::new(),
        }
    }

    pub fn with_attention_drop(mut self, rate: f64) -> Self {
        self.attention_drop = rate;
        self
    }

    pub fn eval() -> Self {
        use rand::SeedableRng;
        Ctx::new(Mode::Eval, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Symmetric uniform initialization in `[-sqrt(3/fan_in), sqrt(3/fan_in)]`,
/// which gives unit-variance inputs unit-variance outputs.
pub fn uniform_fan_in<F: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| F::of(rng.gen_range(-bound..=bound)))
}
