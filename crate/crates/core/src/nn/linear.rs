use rand_chacha::ChaCha8Rng;

use super::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// `y = x · W (+ b)` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, c_in: usize, c_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(vec![c_in, c_out], c_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out])));
        Linear { weight, bias, c_in, c_out }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>, x: Var) -> Result<Var> {
        let y = tape.linear(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.c_in * self.c_out + if self.bias.is_some() { self.c_out } else { 0 }
    }
}
