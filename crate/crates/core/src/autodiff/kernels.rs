//! Dense loops shared by forward and backward rules.
//!
//! All matrices are row-major slices. The `_acc` variants add into `out`.
//! Summation order is fixed, so results are bit-reproducible.

use crate::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Full `MR×NR` output tiles accumulate in registers over all of `k` before
/// touching `out`; ragged edges fall back to row-wise axpy.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i in (0..m_full).step_by(MR) {
        for j in (0..n_full).step_by(NR) {
            let mut acc = [[F::zero(); NR]; MR];
            for p in 0..k {
                let bp = &b[p * n + j..p * n + j + NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (o, &bv) in row.iter_mut().zip(bp) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for (d, &s) in o.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        if n_full < n {
            rows_axpy(a, b, out, i..i + MR, k, n, n_full);
        }
    }
    rows_axpy(a, b, out, m_full..m, k, n, 0);
}

/// Columns `j0..n` of rows `rows` of `out += a · b`.
fn rows_axpy<F: Scalar>(a: &[F], b: &[F], out: &mut [F], rows: std::ops::Range<usize>, k: usize, n: usize, j0: usize) {
    for i in rows {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n + j0..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            axpy(orow, av, &b[p * n + j0..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_b_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    matmul_acc(&transpose(a, m, k), b, out, k, m, n);
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_a_bt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] += dot(arow, brow);
        }
    }
}

/// Dot product with four independent partial sums.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// `out[m×n] += op(a)[m×k] · op(b)[k×n]`, where `op` transposes when the flag
/// is set (`a` is then stored `k×m`, `b` stored `n×k`). The innermost loop runs
/// over the longer of `n` and `k`; the choice depends only on the shapes.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<F: Scalar>(a: &[F], ta: bool, b: &[F], tb: bool, out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if (ta || tb) && m * k * n <= SMALL_GEMM {
        return gemm_strided(a, ta, b, tb, out, m, k, n);
    }
    if n >= k {
        let bt;
        let bn: &[F] = if tb {
            bt = transpose(b, n, k);
            &bt
        } else {
            b
        };
        if ta {
            matmul_acc(&transpose(a, k, m), bn, out, m, k, n);
        } else {
            matmul_acc(a, bn, out, m, k, n);
        }
    } else {
        let at;
        let am: &[F] = if ta {
            at = transpose(a, k, m);
            &at
        } else {
            a
        };
        let bt;
        let bk: &[F] = if tb {
            b
        } else {
            bt = transpose(b, k, n);
            &bt
        };
        for i in 0..m {
            let arow = &am[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] += dot(arow, &bk[j * k..(j + 1) * k]);
            }
        }
    }
}

/// Products up to this many multiply-adds skip the transposed copies.
const SMALL_GEMM: usize = 8192;

/// Transposed operands read in place; for the many tiny per-head products.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<F: Scalar>(a: &[F], ta: bool, b: &[F], tb: bool, out: &mut [F], m: usize, k: usize, n: usize) {
    let (a_row, a_col) = if ta { (1, m) } else { (k, 1) };
    let (b_row, b_col) = if tb { (1, k) } else { (n, 1) };
    for i in 0..m {
        for j in 0..n {
            let mut s = F::zero();
            for p in 0..k {
                s += a[i * a_row + p * a_col] * b[p * b_row + j * b_col];
            }
            out[i * n + j] += s;
        }
    }
}

/// `y += a · x`
pub fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
