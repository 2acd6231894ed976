use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`, applied element-wise.
pub fn sgd_step<F: Scalar>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    velocity: &mut [Tensor<F>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape("sgd_step", params.len(), (grads.len(), velocity.len())));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), (g.shape(), v.shape())));
        }
    }
    let (lr, mu, wd) = (F::of(lr), F::of(momentum), F::of(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Momentum SGD with L2 weight decay over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(store: &ParamStore<F>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    /// `grads` are in store order.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        let mut params: Vec<Tensor<F>> = store
            .params_mut()
            .iter_mut()
            .map(|p| std::mem::replace(&mut p.value, Tensor::zeros(vec![0])))
            .collect();
        let r = sgd_step(&mut params, grads, &mut self.velocity, lr, self.momentum, self.weight_decay);
        for (slot, value) in store.params_mut().iter_mut().zip(params) {
            slot.value = value;
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(x)]
    }

    #[test]
    fn plain_step() {
        let mut p = one(1.0);
        sgd_step(&mut p, &one(2.0), &mut one(0.0), 0.1, 0.0, 0.0).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one(3.0);
        sgd_step(&mut p, &one(0.0), &mut one(0.0), 0.5, 0.9, 0.0).unwrap();
        assert_eq!(p[0].item(), 3.0);
    }

    #[test]
    fn two_momentum_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut p = one(0.0);
        let mut v = one(0.0);
        for _ in 0..2 {
            sgd_step(&mut p, &one(g), &mut v, lr, 0.9, 0.0).unwrap();
        }
        assert!((p[0].item() + lr * g * 2.9).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = vec![Tensor::<f64>::zeros(vec![2])];
        assert!(sgd_step(&mut p, &[Tensor::zeros(vec![3])], &mut [Tensor::zeros(vec![2])], 0.1, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut p, &[], &mut [], 0.1, 0.0, 0.0).is_err());
    }
}
