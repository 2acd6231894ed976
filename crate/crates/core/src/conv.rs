//! Spatial graph convolution and temporal convolution units.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::skeleton::SkeletonGraph;
use crate::tensor::{Scalar, Tensor};

/// Graph convolution variables: one weight, adjacency partition and learnable
/// importance mask per partition, plus a shared bias.
#[derive(Clone, Debug)]
pub struct GcnVars {
    /// `[C_in, C_out]` each
    pub weights: Vec<Var>,
    /// normalized `[V, V]` partitions, indexed `[source, target]`
    pub partitions: Vec<Var>,
    /// `[V, V]` each, multiplied element-wise into the partitions
    pub importance: Vec<Var>,
    /// `[C_out]`
    pub bias: Var,
}

/// `y = Σ_p (A_p ⊙ M_p)ᵀ x W_p + b` on `x[N, T, V, C_in]`.
pub fn gcn_forward<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &GcnVars) -> Result<Var> {
    let k = p.weights.len();
    if k == 0 || p.partitions.len() != k || p.importance.len() != k {
        return Err(Error::invalid(
            "gcn_forward",
            format!("{} weights, {} partitions, {} masks", k, p.partitions.len(), p.importance.len()),
        ));
    }
    let mut acc = None;
    for i in 0..k {
        let a = tape.mul(p.partitions[i], p.importance[i])?;
        let h = tape.linear(x, p.weights[i])?;
        let y = tape.joint_mix(h, a)?;
        acc = Some(match acc {
            None => y,
            Some(s) => tape.add(s, y)?,
        });
    }
    tape.add_bias(acc.unwrap(), p.bias)
}

/// Temporal convolution variables.
#[derive(Clone, Copy, Debug)]
pub struct TcnVars {
    /// `[K, C_in, C_out]`
    pub weight: Var,
    /// `[C_out]`
    pub bias: Var,
    pub stride: usize,
}

/// Per-joint convolution over frames of `x[N, T, V, C_in]` with zero padding `(K-1)/2`.
pub fn tcn_forward<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &TcnVars) -> Result<Var> {
    if !(1..=2).contains(&p.stride) {
        return Err(Error::invalid("tcn_forward", format!("stride must be 1 or 2, got {}", p.stride)));
    }
    let y = tape.temporal_conv(x, p.weight, p.stride)?;
    tape.add_bias(y, p.bias)
}

/// Graph convolution unit over a fixed skeleton graph.
#[derive(Clone, Debug)]
pub struct GcnUnit {
    pub weights: Vec<ParamId>,
    pub importance: Vec<ParamId>,
    pub bias: ParamId,
    partitions: Vec<Tensor<f64>>,
    pub c_in: usize,
    pub c_out: usize,
}

impl GcnUnit {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, graph: &SkeletonGraph, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let v = graph.num_joints();
        let k = graph.num_partitions();
        let weights = (0..k)
            .map(|i| store.add(format!("{name}.w{i}"), uniform_fan_in(vec![c_in, c_out], c_in * k, rng)))
            .collect();
        let importance = (0..k)
            .map(|i| store.add(format!("{name}.importance{i}"), Tensor::ones(vec![v, v])))
            .collect();
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        GcnUnit {
            weights,
            importance,
            bias,
            partitions: graph.partitions().to_vec(),
            c_in,
            c_out,
        }
    }

    pub fn vars<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>) -> GcnVars {
        GcnVars {
            weights: self.weights.iter().map(|&w| p.var(w)).collect(),
            partitions: self.partitions.iter().map(|a| tape.constant(a.cast())).collect(),
            importance: self.importance.iter().map(|&m| p.var(m)).collect(),
            bias: p.var(self.bias),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>, x: Var) -> Result<Var> {
        let vars = self.vars(tape, p);
        gcn_forward(tape, x, &vars)
    }

    /// `(weights, importance, bias)` scalar counts.
    pub fn counts(&self) -> [usize; 3] {
        let v = self.partitions.first().map_or(0, |a| a.shape()[0]);
        let k = self.partitions.len();
        [k * self.c_in * self.c_out, k * v * v, self.c_out]
    }
}

/// Temporal convolution unit.
#[derive(Clone, Debug)]
pub struct TcnUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl TcnUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid("TcnUnit", format!("kernel size must be odd, got {kernel}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("TcnUnit", format!("stride must be 1 or 2, got {stride}")));
        }
        Ok(TcnUnit {
            weight: store.add(format!("{name}.weight"), uniform_fan_in(vec![kernel, c_in, c_out], kernel * c_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out])),
            kernel,
            stride,
            c_in,
            c_out,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>, x: Var) -> Result<Var> {
        tcn_forward(
            tape,
            x,
            &TcnVars {
                weight: p.var(self.weight),
                bias: p.var(self.bias),
                stride: self.stride,
            },
        )
    }

    /// `(weights, bias)` scalar counts.
    pub fn counts(&self) -> [usize; 2] {
        [self.kernel * self.c_in * self.c_out, self.c_out]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::normalize_adjacency;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn single_partition(tape: &mut Tape<f64>, a: Tensor<f64>, w: Tensor<f64>, mask: f64) -> GcnVars {
        let v = a.shape()[0];
        let c = w.shape()[1];
        GcnVars {
            weights: vec![tape.constant(w)],
            partitions: vec![tape.constant(a)],
            importance: vec![tape.constant(Tensor::full(vec![v, v], mask))],
            bias: tape.constant(Tensor::full(vec![c], 0.25)),
        }
    }

    #[test]
    fn identity_adjacency_and_weight_only_add_bias() {
        let mut tape = Tape::new();
        let p = single_partition(&mut tape, Tensor::eye(3), Tensor::eye(2), 1.0);
        let xv = Tensor::from_fn(vec![1, 2, 3, 2], |i| (i[1] * 6 + i[2] * 2 + i[3]) as f64);
        let x = tape.constant(xv.clone());
        let y = gcn_forward(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).max_abs_diff(&xv.map(|v| v + 0.25)) < 1e-12);
    }

    #[test]
    fn two_joint_average() {
        let g = normalize_adjacency(2, &[(0, 1)], 0).unwrap();
        let mut tape = Tape::new();
        let p = single_partition(&mut tape, g.normalized_full(), Tensor::eye(1), 1.0);
        let x = tape.constant(t(&[1, 1, 2, 1], &[0.0, 2.0]));
        let y = gcn_forward(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).max_abs_diff(&t(&[1, 1, 2, 1], &[1.25, 1.25])) < 1e-12);
    }

    #[test]
    fn partitions_sum_to_full_adjacency() {
        let g = SkeletonGraph::chain(4).unwrap();
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::eye(1));
        let vars = GcnVars {
            weights: vec![w; 3],
            partitions: g.partitions().iter().map(|a| tape.constant(a.clone())).collect(),
            importance: (0..3).map(|_| tape.constant(Tensor::ones(vec![4, 4]))).collect(),
            bias: tape.constant(Tensor::zeros(vec![1])),
        };
        let xv = t(&[1, 1, 4, 1], &[1.0, -2.0, 0.5, 3.0]);
        let x = tape.constant(xv.clone());
        let y = gcn_forward(&mut tape, x, &vars).unwrap();
        let a = g.normalized_full();
        for w in 0..4 {
            let expect: f64 = (0..4).map(|v| a.at(&[v, w]) * xv.data()[v]).sum();
            assert!((tape.value(y).data()[w] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_importance_leaves_bias() {
        let mut tape = Tape::new();
        let p = single_partition(&mut tape, Tensor::full(vec![2, 2], 0.5), Tensor::eye(1), 0.0);
        let x = tape.constant(t(&[1, 1, 2, 1], &[3.0, -7.0]));
        let y = gcn_forward(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.25]);
    }

    #[test]
    fn three_tap_average_of_ramp() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1, 1], &[0.0, 1.0, 2.0, 3.0]));
        let p = TcnVars {
            weight: tape.constant(Tensor::full(vec![3, 1, 1], 1.0 / 3.0)),
            bias: tape.constant(Tensor::zeros(vec![1])),
            stride: 1,
        };
        let y = tcn_forward(&mut tape, x, &p).unwrap();
        let expect = [1.0 / 3.0, 1.0, 2.0, 5.0 / 3.0];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_halves_length() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![2, 8, 3, 4]));
        let p = TcnVars {
            weight: tape.constant(Tensor::ones(vec![9, 4, 5])),
            bias: tape.constant(Tensor::zeros(vec![5])),
            stride: 2,
        };
        let y = tcn_forward(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3, 5]);
        let bad = TcnVars { stride: 3, ..p };
        assert!(tcn_forward(&mut tape, x, &bad).is_err());
    }

    #[test]
    fn unit_counts_at_256_channels() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let g = GcnUnit::new(&mut store, "g", &SkeletonGraph::ntu(), 256, 256, &mut rng);
        assert_eq!(g.counts(), [196_608, 1_875, 256]);
        let tcn = TcnUnit::new(&mut store, "t", 256, 256, 9, 1, &mut rng).unwrap();
        assert_eq!(tcn.counts(), [589_824, 256]);
        assert!(TcnUnit::new(&mut store, "t", 4, 4, 4, 1, &mut rng).is_err());
    }
}
