//! Spatial and temporal multi-head self-attention over skeleton sequences.
//!
//! Both modules share one core: for each sequence of nodes, queries, keys and
//! values come from linear maps shared across nodes, scores are the scaled
//! query-key dot products softmaxed over the keys, each node's embedding is
//! the score-weighted sum of values, and the heads are concatenated and mixed
//! by an output map. Spatial attention treats the joints of one frame as the
//! sequence; temporal attention treats the frames of one joint as the sequence.
//! Neither adds positional information.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Bound, Ctx, Mode, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Head count and total query/key and value widths of one attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionWidths {
    pub heads: usize,
    /// Total query/key width (`d_q = d_k`), split evenly across heads.
    pub key_width: usize,
    /// Total value width, split evenly across heads.
    pub value_width: usize,
}

impl AttentionWidths {
    /// Key width `c_out / 4`, value width `c_out`, and the largest head count
    /// not above `max_heads` that divides both.
    pub fn for_channels(c_out: usize, max_heads: usize) -> Self {
        let key_width = (c_out / 4).max(1);
        let value_width = c_out.max(1);
        let heads = (1..=max_heads.max(1))
            .rev()
            .find(|h| key_width.is_multiple_of(*h) && value_width.is_multiple_of(*h))
            .unwrap_or(1);
        AttentionWidths {
            heads,
            key_width,
            value_width,
        }
    }

    pub fn head_key(&self) -> usize {
        self.key_width / self.heads
    }

    pub fn head_value(&self) -> usize {
        self.value_width / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.key_width.is_multiple_of(self.heads) || !self.value_width.is_multiple_of(self.heads) || self.key_width == 0 {
            return Err(Error::invalid("attention", format!("widths {self:?} do not split evenly across heads")));
        }
        Ok(())
    }
}

/// The four maps of one attention module, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[C_in, key_width]`
    pub w_q: Var,
    /// `[C_in, key_width]`
    pub w_k: Var,
    /// `[C_in, value_width]`
    pub w_v: Var,
    /// `[value_width, C_out]`
    pub w_o: Var,
    pub widths: AttentionWidths,
    pub drop_rate: f64,
}

/// Dropout on attention rows: each entry is zeroed with probability `drop_rate`
/// and the row renormalized. Identity in eval mode or at rate 0.
pub fn drop_attention<F: Scalar>(tape: &mut Tape<F>, scores: Var, drop_rate: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
    match drop_mask(tape.value(scores).numel(), drop_rate, mode, rng)? {
        Some(keep) => tape.drop_attention(scores, keep),
        None => Ok(scores),
    }
}

/// Keep mask for attention dropout; `None` when dropout is inactive.
fn drop_mask(n: usize, drop_rate: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Option<Vec<bool>>> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::invalid("drop_attention", format!("drop rate {drop_rate} not in [0, 1)")));
    }
    if mode == Mode::Eval || drop_rate == 0.0 {
        return Ok(None);
    }
    let threshold = (drop_rate * 4_294_967_296.0) as u64;
    Ok(Some((0..n).map(|_| u64::from(rng.gen::<u32>()) >= threshold).collect()))
}

/// Attention over sequences `x[B, L, C_in]`; returns the output `[B, L, C_out]`
/// and the (post-dropout) scores `[B, H, L, L]` as a constant.
pub fn attend<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<(Var, Var)> {
    let (out, z) = attend_core(tape, x, p, ctx)?;
    let alpha = tape.attention_weights(z).expect("attention node");
    Ok((out, tape.constant(alpha)))
}

/// Output and the raw attention node.
fn attend_core<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<(Var, Var)> {
    p.widths.validate()?;
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("attention", "[B, L, C]", s));
    }
    let (b, l) = (s[0], s[1]);
    if l == 0 {
        return Err(Error::invalid("attention", "sequence length must be at least 1"));
    }
    let h = p.widths.heads;
    let q = tape.linear(x, p.w_q)?;
    let k = tape.linear(x, p.w_k)?;
    let v = tape.linear(x, p.w_v)?;
    let keep = drop_mask(b * h * l * l, p.drop_rate, ctx.mode, &mut ctx.rng)?;
    let z = tape.attention(q, k, v, h, keep)?;
    Ok((tape.linear(z, p.w_o)?, z))
}

fn check_nctv<F: Scalar>(tape: &Tape<F>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    s.try_into().map_err(|_| Error::shape(op, "[N, T, V, C]", s))
}

/// Spatial self-attention on `x[N, T, V, C_in]`: joints attend to joints within each frame.
pub fn ssa_forward<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<Var> {
    ssa(tape, x, p, ctx).map(|(y, _)| y)
}

/// As [`ssa_forward`], also returning scores shaped `[N, T, H, V, V]`.
pub fn ssa_forward_with_scores<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<(Var, Var)> {
    let (y, z) = ssa(tape, x, p, ctx)?;
    let [n, t, v, _] = check_nctv(tape, x, "ssa_forward")?;
    let alpha = tape.attention_weights(z).expect("attention node");
    let alpha = tape.constant(alpha.reshape(vec![n, t, p.widths.heads, v, v])?);
    Ok((y, alpha))
}

fn ssa<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<(Var, Var)> {
    let [n, t, v, c] = check_nctv(tape, x, "ssa_forward")?;
    if v == 0 {
        return Err(Error::invalid("ssa_forward", "need at least one joint"));
    }
    let seq = tape.reshape(x, &[n * t, v, c])?;
    let (y, z) = attend_core(tape, seq, p, ctx)?;
    let c_out = *tape.shape(y).last().unwrap();
    Ok((tape.reshape(y, &[n, t, v, c_out])?, z))
}

/// Temporal self-attention on `x[N, T, V, C_in]`: each joint's frames attend to each other.
pub fn tsa_forward<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<Var> {
    tsa(tape, x, p, ctx).map(|(y, _)| y)
}

/// As [`tsa_forward`], also returning scores shaped `[N, V, H, T, T]`.
pub fn tsa_forward_with_scores<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<(Var, Var)> {
    let (y, z) = tsa(tape, x, p, ctx)?;
    let [n, t, v, _] = check_nctv(tape, x, "tsa_forward")?;
    let alpha = tape.attention_weights(z).expect("attention node");
    let alpha = tape.constant(alpha.reshape(vec![n, v, p.widths.heads, t, t])?);
    Ok((y, alpha))
}

fn tsa<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &AttentionVars, ctx: &mut Ctx<F>) -> Result<(Var, Var)> {
    let [n, t, v, c] = check_nctv(tape, x, "tsa_forward")?;
    if t == 0 {
        return Err(Error::invalid("tsa_forward", "need at least one frame"));
    }
    let xt = tape.permute(x, &[0, 2, 1, 3])?;
    let seq = tape.reshape(xt, &[n * v, t, c])?;
    let (y, z) = attend_core(tape, seq, p, ctx)?;
    let c_out = *tape.shape(y).last().unwrap();
    let y = tape.reshape(y, &[n, v, t, c_out])?;
    Ok((tape.permute(y, &[0, 2, 1, 3])?, z))
}

/// Concatenates per-head outputs `[..., d_v]` along channels and applies `w_o`.
pub fn multi_head_combine<F: Scalar>(tape: &mut Tape<F>, heads: &[Var], w_o: Var) -> Result<Var> {
    if let Some(&first) = heads.first() {
        let s = tape.shape(first).to_vec();
        if let Some(&bad) = heads.iter().find(|&&h| tape.shape(h) != s) {
            return Err(Error::shape("multi_head_combine", s, tape.shape(bad)));
        }
    }
    let z = tape.concat_last(heads)?;
    tape.linear(z, w_o)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionAxis {
    Spatial,
    Temporal,
}

/// A self-attention module with parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub widths: AttentionWidths,
    pub axis: AttentionAxis,
}

impl SelfAttention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        widths: AttentionWidths,
        axis: AttentionAxis,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_q = store.add(format!("{name}.w_q"), uniform_fan_in(vec![c_in, widths.key_width], c_in, rng));
        let w_k = store.add(format!("{name}.w_k"), uniform_fan_in(vec![c_in, widths.key_width], c_in, rng));
        let w_v = store.add(format!("{name}.w_v"), uniform_fan_in(vec![c_in, widths.value_width], c_in, rng));
        let w_o = store.add(
            format!("{name}.w_o"),
            uniform_fan_in(vec![widths.value_width, c_out], widths.value_width, rng),
        );
        SelfAttention {
            w_q,
            w_k,
            w_v,
            w_o,
            c_in,
            c_out,
            widths,
            axis,
        }
    }

    pub fn vars<F: Scalar>(&self, p: &Bound<F>, drop_rate: f64) -> AttentionVars {
        AttentionVars {
            w_q: p.var(self.w_q),
            w_k: p.var(self.w_k),
            w_v: p.var(self.w_v),
            w_o: p.var(self.w_o),
            widths: self.widths,
            drop_rate,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound<F>, x: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        let vars = self.vars(p, ctx.attention_drop);
        match self.axis {
            AttentionAxis::Spatial => ssa_forward(tape, x, &vars, ctx),
            AttentionAxis::Temporal => tsa_forward(tape, x, &vars, ctx),
        }
    }

    /// Weight counts `(w_q, w_k, w_v, w_o)`.
    pub fn weight_counts(&self) -> [usize; 4] {
        weight_counts(self.c_in, self.c_out, self.widths)
    }
}

pub fn weight_counts(c_in: usize, c_out: usize, w: AttentionWidths) -> [usize; 4] {
    [c_in * w.key_width, c_in * w.key_width, c_in * w.value_width, w.value_width * c_out]
}
