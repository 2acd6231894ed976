//! Finite-difference checks of every differentiable tape op and of both tiny streams.
//!
//! Each case draws its inputs from a seed, reduces the output `y` to a scalar
//! with a fixed random projection `sum(y ⊙ R)`, and compares tape gradients
//! against central differences in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_combine, ssa_forward, tsa_forward, AttentionVars, AttentionWidths};
use crate::autodiff::{finite_diff_check_many, GradCheckReport, Tape, Var};
use crate::conv::{gcn_forward, tcn_forward, GcnVars, TcnVars};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig, Stream};
use crate::nn::{Ctx, Mode};
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

/// Largest accepted `|analytic - numeric| / max(1, |analytic|)`.
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "linear",
    "bmm",
    "bmm_trans",
    "permute",
    "reshape",
    "softmax_mid",
    "softmax_last",
    "relu",
    "sum",
    "mean",
    "mean_dim1",
    "concat_last",
    "batch_norm_train",
    "batch_norm_eval",
    "temporal_conv_s1",
    "temporal_conv_s2",
    "joint_mix",
    "time_subsample",
    "drop_attention",
    "attention",
    "attention_dropout",
    "cross_entropy",
    "multi_head_combine",
    "ssa",
    "ssa_dropout",
    "tsa",
    "gcn",
    "tcn_s1",
    "tcn_s2",
];

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(y ⊙ r)`.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    if tape.shape(y) != r.shape() {
        return Err(Error::shape("project", r.shape(), tape.shape(y)));
    }
    let rv = tape.constant(r.clone());
    let z = tape.mul(y, rv)?;
    tape.sum(z)
}

/// Runs `f` on `inputs`, sizing the projection from a first forward pass.
fn check<G>(inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng, mut f: G) -> Result<GradCheckReport>
where
    G: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        tape.shape(y).to_vec()
    };
    let r = uniform(&out_shape, -1.0, 1.0, rng);
    finite_diff_check_many(
        |tape, vars| {
            let y = f(tape, vars)?;
            project(tape, y, &r)
        },
        &inputs,
        FD_STEP,
    )
}

fn attention_inputs(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> (AttentionWidths, Vec<Tensor<f64>>) {
    let w = AttentionWidths::for_channels(c_out, 8);
    let s = 1.0 / (c_in as f64).sqrt();
    let params = vec![
        uniform(&[c_in, w.key_width], -s, s, rng),
        uniform(&[c_in, w.key_width], -s, s, rng),
        uniform(&[c_in, w.value_width], -s, s, rng),
        uniform(&[w.value_width, c_out], -s, s, rng),
    ];
    (w, params)
}

fn attention_vars(v: &[Var], widths: AttentionWidths, drop_rate: f64) -> AttentionVars {
    AttentionVars {
        w_q: v[0],
        w_k: v[1],
        w_v: v[2],
        w_o: v[3],
        widths,
        drop_rate,
    }
}

/// Gradient check of one named op from [`OPS`].
pub fn check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let pair = |r: &mut ChaCha8Rng| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)];
    match name {
        "add" => {
            let xs = pair(r);
            check(xs, r, |t, v| t.add(v[0], v[1]))
        }
        "sub" => {
            let xs = pair(r);
            check(xs, r, |t, v| t.sub(v[0], v[1]))
        }
        "mul" => {
            let xs = pair(r);
            check(xs, r, |t, v| t.mul(v[0], v[1]))
        }
        "scale" => {
            let x = uniform(&[3, 4], -1.0, 1.0, r);
            let s = r.gen_range(-2.0..2.0);
            check(vec![x], r, move |t, v| t.scale(v[0], s))
        }
        "add_bias" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.add_bias(v[0], v[1]))
        }
        "linear" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.linear(v[0], v[1]))
        }
        "bmm" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 4, 5], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.bmm(v[0], v[1], false))
        }
        "bmm_trans" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 5, 4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.bmm(v[0], v[1], true))
        }
        "permute" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.permute(v[0], &[2, 0, 1]))
        }
        "reshape" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.reshape(v[0], &[6, 4]))
        }
        "softmax_mid" => {
            let xs = vec![uniform(&[2, 3, 4], -2.0, 2.0, r)];
            check(xs, r, |t, v| t.softmax(v[0], 1))
        }
        "softmax_last" => {
            let xs = vec![uniform(&[2, 3, 4], -2.0, 2.0, r)];
            check(xs, r, |t, v| t.softmax(v[0], 2))
        }
        "relu" => {
            let xs = vec![away_from_zero(&[3, 5], r)];
            check(xs, r, |t, v| t.relu(v[0]))
        }
        "sum" => {
            let xs = vec![uniform(&[3, 4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.sum(v[0]))
        }
        "mean" => {
            let xs = vec![uniform(&[3, 4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.mean(v[0]))
        }
        "mean_dim1" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.mean_dim1(v[0]))
        }
        "concat_last" => {
            let xs = vec![uniform(&[2, 3, 2], -1.0, 1.0, r), uniform(&[2, 3, 3], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.concat_last(&[v[0], v[1]]))
        }
        "batch_norm_train" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[4], 0.5, 1.5, r), uniform(&[4], -0.5, 0.5, r)];
            check(xs, r, |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y))
        }
        "batch_norm_eval" => {
            let xs = vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[4], 0.5, 1.5, r), uniform(&[4], -0.5, 0.5, r)];
            let mean = uniform(&[4], -0.5, 0.5, r).into_data();
            let var = uniform(&[4], 0.5, 2.0, r).into_data();
            check(xs, r, move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
        }
        "temporal_conv_s1" | "temporal_conv_s2" => {
            let stride = if name.ends_with('1') { 1 } else { 2 };
            let xs = vec![uniform(&[2, 6, 3, 2], -1.0, 1.0, r), uniform(&[5, 2, 3], -0.5, 0.5, r)];
            check(xs, r, move |t, v| t.temporal_conv(v[0], v[1], stride))
        }
        "joint_mix" => {
            let xs = vec![uniform(&[2, 3, 4, 2], -1.0, 1.0, r), uniform(&[4, 4], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.joint_mix(v[0], v[1]))
        }
        "time_subsample" => {
            let xs = vec![uniform(&[2, 5, 3, 2], -1.0, 1.0, r)];
            check(xs, r, |t, v| t.time_subsample(v[0], 2))
        }
        "drop_attention" => {
            let xs = vec![uniform(&[3, 4, 5], 0.1, 1.0, r)];
            let keep: Vec<bool> = (0..60).map(|_| r.gen_bool(0.7)).collect();
            check(xs, r, move |t, v| t.drop_attention(v[0], keep.clone()))
        }
        "attention" => {
            let xs = vec![
                uniform(&[2, 4, 6], -1.0, 1.0, r),
                uniform(&[2, 4, 6], -1.0, 1.0, r),
                uniform(&[2, 4, 4], -1.0, 1.0, r),
            ];
            check(xs, r, |t, v| t.attention(v[0], v[1], v[2], 2, None))
        }
        "attention_dropout" => {
            let xs = vec![
                uniform(&[2, 4, 6], -1.0, 1.0, r),
                uniform(&[2, 4, 6], -1.0, 1.0, r),
                uniform(&[2, 4, 4], -1.0, 1.0, r),
            ];
            let keep: Vec<bool> = (0..2 * 2 * 4 * 4).map(|_| r.gen_bool(0.7)).collect();
            check(xs, r, move |t, v| t.attention(v[0], v[1], v[2], 2, Some(keep.clone())))
        }
        "cross_entropy" => {
            let xs = vec![uniform(&[4, 5], -2.0, 2.0, r)];
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            check(xs, r, move |t, v| t.cross_entropy(v[0], &labels))
        }
        "multi_head_combine" => {
            let xs = vec![
                uniform(&[2, 3, 2], -1.0, 1.0, r),
                uniform(&[2, 3, 2], -1.0, 1.0, r),
                uniform(&[4, 3], -1.0, 1.0, r),
            ];
            check(xs, r, |t, v| multi_head_combine(t, &[v[0], v[1]], v[2]))
        }
        "ssa" | "ssa_dropout" | "tsa" => {
            let (widths, mut xs) = attention_inputs(4, 8, r);
            xs.insert(0, uniform(&[2, 3, 5, 4], -1.0, 1.0, r));
            let drop = if name == "ssa_dropout" { 0.3 } else { 0.0 };
            let temporal = name == "tsa";
            let mask_seed = r.gen();
            check(xs, r, move |t, v| {
                let p = attention_vars(&v[1..], widths, drop);
                let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(mask_seed));
                if temporal {
                    tsa_forward(t, v[0], &p, &mut ctx)
                } else {
                    ssa_forward(t, v[0], &p, &mut ctx)
                }
            })
        }
        "gcn" => {
            let graph = SkeletonGraph::chain(5)?;
            let k = graph.num_partitions();
            let mut xs = vec![uniform(&[2, 3, 5, 3], -1.0, 1.0, r)];
            xs.extend((0..k).map(|_| uniform(&[3, 4], -0.5, 0.5, r)));
            xs.extend((0..k).map(|_| uniform(&[5, 5], 0.5, 1.5, r)));
            xs.push(uniform(&[4], -0.5, 0.5, r));
            let parts = graph.partitions().to_vec();
            check(xs, r, move |t, v| {
                let p = GcnVars {
                    weights: v[1..1 + k].to_vec(),
                    partitions: parts.iter().map(|a| t.constant(a.clone())).collect(),
                    importance: v[1 + k..1 + 2 * k].to_vec(),
                    bias: v[1 + 2 * k],
                };
                gcn_forward(t, v[0], &p)
            })
        }
        "tcn_s1" | "tcn_s2" => {
            let stride = if name.ends_with('1') { 1 } else { 2 };
            let xs = vec![
                uniform(&[2, 7, 2, 3], -1.0, 1.0, r),
                uniform(&[9, 3, 2], -0.3, 0.3, r),
                uniform(&[2], -0.5, 0.5, r),
            ];
            check(xs, r, move |t, v| {
                tcn_forward(
                    t,
                    v[0],
                    &TcnVars {
                        weight: v[1],
                        bias: v[2],
                        stride,
                    },
                )
            })
        }
        _ => Err(Error::invalid("check_op", format!("unknown op {name:?}"))),
    }
}

/// Gradient check of a full tiny stream in training mode, with respect to the
/// input clip and every parameter. Attention dropout is on with a fixed mask.
pub fn check_stream(stream: Stream, seed: u64) -> Result<GradCheckReport> {
    let cfg = NetworkConfig::tiny(stream, 3)?;
    let v = cfg.graph.joints();
    let model = Model::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs = vec![uniform(&[2, 3, 6, v, 2], -1.0, 1.0, &mut rng)];
    // Perturb the initial values so biases, norms and masks are not at their constants.
    for p in model.store.params() {
        let noise = uniform(p.value.shape(), -0.1, 0.1, &mut rng);
        let data = p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        inputs.push(Tensor::new(p.value.shape().to_vec(), data)?);
    }
    let mask_seed = rng.gen();
    check(inputs, &mut rng, |tape, vars| {
        let p = model.store.bind_vars(vars[1..].to_vec())?;
        let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(mask_seed)).with_attention_drop(0.1);
        model.net.forward(tape, &p, vars[0], &mut ctx)
    })
}

/// Every op and both streams over `seeds`.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &op in OPS {
            out.push(GradCase {
                name: op.to_string(),
                seed,
                report: check_op(op, seed)?,
            });
        }
        for stream in [Stream::STr, Stream::TTr] {
            out.push(GradCase {
                name: format!("stream:{}", stream.name()),
                seed,
                report: check_stream(stream, seed)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("nope", 0).is_err());
    }

    #[test]
    fn every_op_passes_one_seed() {
        for &op in OPS {
            let r = check_op(op, 7).unwrap();
            assert!(r.max_rel_error < GRAD_TOLERANCE, "{op}: {r:?}");
            assert!(r.coords_checked > 0);
        }
    }

    #[test]
    fn tiny_streams_pass_one_seed() {
        for stream in [Stream::STr, Stream::TTr] {
            let r = check_stream(stream, 3).unwrap();
            assert!(r.max_rel_error < GRAD_TOLERANCE, "{}: {r:?}", stream.name());
            assert!(r.coords_checked > 1000);
        }
    }

    #[test]
    fn broken_gradient_is_detected() {
        // A constant slipped in place of the input hides its gradient from the tape.
        let x = Tensor::from_f64(vec![3], &[0.3, -0.2, 0.9]).unwrap();
        let r = finite_diff_check_many(
            |t, v| {
                let c = t.constant(t.value(v[0]).clone());
                let y = t.mul(v[0], c)?;
                t.sum(y)
            },
            &[x],
            FD_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
