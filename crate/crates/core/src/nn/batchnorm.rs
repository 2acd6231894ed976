use super::{Bound, BufferId, Ctx, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over all leading axes of `[..., C]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![channels])),
            channels,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>, x: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        let (g, b) = (p.var(self.gamma), p.var(self.beta));
        let eps = F::of(BN_EPS);
        if ctx.is_train() {
            let (y, stats) = tape.batch_norm_train(x, g, b, eps)?;
            ctx.bn_updates.push((self.running_mean, self.running_var, stats));
            Ok(y)
        } else {
            let (mean, var) = (p.buffer(self.running_mean).data(), p.buffer(self.running_var).data());
            tape.batch_norm_eval(x, g, b, mean, var, eps)
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}
