//! Independent loop-based references shared by the integration tests.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sttr_core::attention::{ssa_forward, tsa_forward, AttentionVars, AttentionWidths};
use sttr_core::autodiff::Tape;
use sttr_core::conv::{gcn_forward, GcnVars};
use sttr_core::nn::Ctx;
use sttr_core::skeleton::SkeletonGraph;
use sttr_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

/// Plain weights of one attention module.
pub struct AttnWeights {
    pub wq: Tensor<f64>,
    pub wk: Tensor<f64>,
    pub wv: Tensor<f64>,
    pub wo: Tensor<f64>,
    pub widths: AttentionWidths,
}

impl AttnWeights {
    pub fn random(c_in: usize, c_out: usize, max_heads: usize, r: &mut ChaCha8Rng) -> Self {
        let widths = AttentionWidths::for_channels(c_out, max_heads);
        AttnWeights {
            wq: rand_tensor(&[c_in, widths.key_width], r),
            wk: rand_tensor(&[c_in, widths.key_width], r),
            wv: rand_tensor(&[c_in, widths.value_width], r),
            wo: rand_tensor(&[widths.value_width, c_out], r),
            widths,
        }
    }
}

/// Self-attention over one sequence `seq[l][c]`, written out head by head.
pub fn naive_attention_seq(seq: &[Vec<f64>], w: &AttnWeights) -> Vec<Vec<f64>> {
    let l = seq.len();
    let c_in = seq[0].len();
    let (h, dk, dv) = (w.widths.heads, w.widths.head_key(), w.widths.head_value());
    let c_out = w.wo.shape()[1];
    let project = |m: &Tensor<f64>, node: &[f64], col: usize| -> f64 { (0..c_in).map(|c| node[c] * m.at(&[c, col])).sum() };
    let mut concat = vec![vec![0.0; h * dv]; l];
    for head in 0..h {
        for i in 0..l {
            let q: Vec<f64> = (0..dk).map(|j| project(&w.wq, &seq[i], head * dk + j)).collect();
            let scores: Vec<f64> = (0..l)
                .map(|k| {
                    let key: Vec<f64> = (0..dk).map(|j| project(&w.wk, &seq[k], head * dk + j)).collect();
                    q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..l {
                let alpha = exps[k] / z;
                for j in 0..dv {
                    concat[i][head * dv + j] += alpha * project(&w.wv, &seq[k], head * dv + j);
                }
            }
        }
    }
    concat
        .iter()
        .map(|zi| {
            (0..c_out)
                .map(|o| zi.iter().enumerate().map(|(i, z)| z * w.wo.at(&[i, o])).sum())
                .collect()
        })
        .collect()
}

/// Joints attend to joints within each frame of `x[N, T, V, C]`.
pub fn naive_ssa(x: &Tensor<f64>, w: &AttnWeights) -> Tensor<f64> {
    let s = x.shape();
    let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
    let c_out = w.wo.shape()[1];
    let mut out = Tensor::zeros(vec![n, t, v, c_out]);
    for ni in 0..n {
        for ti in 0..t {
            let seq: Vec<Vec<f64>> = (0..v).map(|vi| (0..c).map(|ci| x.at(&[ni, ti, vi, ci])).collect()).collect();
            for (vi, row) in naive_attention_seq(&seq, w).into_iter().enumerate() {
                for (o, val) in row.into_iter().enumerate() {
                    out.set(&[ni, ti, vi, o], val);
                }
            }
        }
    }
    out
}

/// Frames attend to frames for each joint of `x[N, T, V, C]`.
pub fn naive_tsa(x: &Tensor<f64>, w: &AttnWeights) -> Tensor<f64> {
    let s = x.shape();
    let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
    let c_out = w.wo.shape()[1];
    let mut out = Tensor::zeros(vec![n, t, v, c_out]);
    for ni in 0..n {
        for vi in 0..v {
            let seq: Vec<Vec<f64>> = (0..t).map(|ti| (0..c).map(|ci| x.at(&[ni, ti, vi, ci])).collect()).collect();
            for (ti, row) in naive_attention_seq(&seq, w).into_iter().enumerate() {
                for (o, val) in row.into_iter().enumerate() {
                    out.set(&[ni, ti, vi, o], val);
                }
            }
        }
    }
    out
}

/// Sum of the two probability vectors per sample, then argmax with ties to the lowest class.
pub fn hand_fuse(a: &[Vec<f64>], b: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let sums: Vec<Vec<f64>> = a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    let preds = sums
        .iter()
        .map(|s| {
            let mut best = 0;
            for k in 1..s.len() {
                if s[k] > s[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    (sums, preds)
}

/// `out[.., i, ..] = x[.., perm[i], ..]` along `axis`.
pub fn permute_axis(x: &Tensor<f64>, axis: usize, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(x.shape().to_vec(), |ix| {
        let mut src = ix.to_vec();
        src[axis] = perm[ix[axis]];
        x.at(&src)
    })
}

pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

/// Library attention in eval mode on constant inputs.
pub fn run_attention(x: &Tensor<f64>, w: &AttnWeights, temporal: bool) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let p = AttentionVars {
        w_q: tape.constant(w.wq.clone()),
        w_k: tape.constant(w.wk.clone()),
        w_v: tape.constant(w.wv.clone()),
        w_o: tape.constant(w.wo.clone()),
        widths: w.widths,
        drop_rate: 0.0,
    };
    let y = if temporal {
        tsa_forward(&mut tape, xv, &p, &mut Ctx::eval()).unwrap()
    } else {
        ssa_forward(&mut tape, xv, &p, &mut Ctx::eval()).unwrap()
    };
    tape.value(y).clone()
}

pub fn run_gcn(x: &Tensor<f64>, graph: &SkeletonGraph, weights: &[Tensor<f64>], masks: &[Tensor<f64>], bias: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let p = GcnVars {
        weights: weights.iter().map(|w| tape.constant(w.clone())).collect(),
        partitions: graph.partitions().iter().map(|a| tape.constant(a.clone())).collect(),
        importance: masks.iter().map(|m| tape.constant(m.clone())).collect(),
        bias: tape.constant(bias.clone()),
    };
    let y = gcn_forward(&mut tape, xv, &p).unwrap();
    tape.value(y).clone()
}

/// Max deviation of `SSA(P x)` from `P SSA(x)` under a random joint permutation.
pub fn ssa_equivariance_gap(seed: u64, t: usize, v: usize) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[2, t, v, 3], &mut r);
    let w = AttnWeights::random(3, 8, 8, &mut r);
    let perm = shuffled(v, seed ^ 1);
    let lhs = run_attention(&permute_axis(&x, 2, &perm), &w, false);
    let rhs = permute_axis(&run_attention(&x, &w, false), 2, &perm);
    lhs.max_abs_diff(&rhs)
}

/// Same for TSA under a random frame permutation.
pub fn tsa_equivariance_gap(seed: u64, t: usize, v: usize) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[2, t, v, 3], &mut r);
    let w = AttnWeights::random(3, 8, 8, &mut r);
    let perm = shuffled(t, seed ^ 2);
    let lhs = run_attention(&permute_axis(&x, 1, &perm), &w, true);
    let rhs = permute_axis(&run_attention(&x, &w, true), 1, &perm);
    lhs.max_abs_diff(&rhs)
}

/// GCN on a relabeled graph with relabeled importance masks against the relabeled output.
pub fn gcn_equivariance_gap(seed: u64, graph: &SkeletonGraph) -> f64 {
    let mut r = rng(seed);
    let (v, k) = (graph.num_joints(), graph.num_partitions());
    let x = rand_tensor(&[2, 3, v, 3], &mut r);
    let weights: Vec<Tensor<f64>> = (0..k).map(|_| rand_tensor(&[3, 4], &mut r)).collect();
    let masks: Vec<Tensor<f64>> = (0..k).map(|_| rand_tensor(&[v, v], &mut r)).collect();
    let bias = rand_tensor(&[4], &mut r);
    let perm = shuffled(v, seed ^ 3);
    let pgraph = graph.permuted(&perm).unwrap();
    let pmasks: Vec<Tensor<f64>> = masks.iter().map(|m| permute_axis(&permute_axis(m, 0, &perm), 1, &perm)).collect();
    let lhs = run_gcn(&permute_axis(&x, 2, &perm), &pgraph, &weights, &pmasks, &bias);
    let rhs = permute_axis(&run_gcn(&x, graph, &weights, &masks, &bias), 2, &perm);
    lhs.max_abs_diff(&rhs)
}

/// Worst library-versus-loop difference over 20 random SSA or TSA instances.
pub fn attention_oracle_gap(temporal: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let (n, t, v) = (r.gen_range(1..3), r.gen_range(1..7), r.gen_range(1..7));
        let c_in = r.gen_range(1..6);
        let c_out = [4, 8, 12, 16][r.gen_range(0..4)];
        let x = rand_tensor(&[n, t, v, c_in], &mut r);
        let w = AttnWeights::random(c_in, c_out, 8, &mut r);
        let expected = if temporal { naive_tsa(&x, &w) } else { naive_ssa(&x, &w) };
        let got = run_attention(&x, &w, temporal);
        assert_eq!(got.shape(), expected.shape());
        worst = worst.max(got.max_abs_diff(&expected));
    }
    worst
}
