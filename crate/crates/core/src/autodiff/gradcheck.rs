//! Central-difference gradient checking.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Mismatches above this are re-measured with a tenth of the step.
const RETRY_ABOVE: f64 = 1e-7;

/// Compares the tape gradient of scalar `f` at `x` with central differences of step `h`.
pub fn finite_diff_check<G>(mut f: G, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    G: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`finite_diff_check`]: every coordinate of every input is perturbed.
pub fn finite_diff_check_many<G>(mut f: G, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    G: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_check", format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    drop(tape);

    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut central = |work: &mut [Tensor<f64>], i: usize, j: usize, step: f64| -> Result<f64> {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let plus = eval(work)?;
        work[i].data_mut()[j] = orig - step;
        let minus = eval(work)?;
        work[i].data_mut()[j] = orig;
        Ok((plus - minus) / (2.0 * step))
    };
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..work[i].numel() {
            let a = grad.data()[j];
            let rel_at = |numeric: f64| (a - numeric).abs() / a.abs().max(1.0);
            let mut rel = rel_at(central(&mut work, i, j, h)?);
            if rel > RETRY_ABOVE {
                // a step that straddles a ReLU kink is not a derivative; a wrong gradient fails at both steps
                rel = rel.min(rel_at(central(&mut work, i, j, h / 10.0)?));
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_across_a_kink_is_remeasured() {
        // 3e-7 above the ReLU kink: a 1e-6 step straddles it, a 1e-7 step does not
        let x = Tensor::from_f64(vec![2], &[3e-7, 0.5]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let y = t.relu(v)?;
                t.sum(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
