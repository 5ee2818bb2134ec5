//! Scalar kernels behind the tape ops.
//!
//! Plain loops over slices, no SIMD, no blocking. At the matrix sizes this
//! pipeline uses (widths of a few dozen, sequences under a hundred) the
//! naive `i,k,j` loop order is already memory-friendly and keeps every
//! kernel obviously correct. Parallelism happens one level up, across
//! samples, never inside a kernel, so results do not depend on thread
//! count.

/// `a (m x k) * b (k x n)` row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is stored `n x k`. Both operands are walked
/// row-wise, so this is the cheapest product in the file.
pub fn matmul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a^T * c` where `a` is stored `m x k` and `c` is `m x n`; result `k x n`.
/// Used by backward passes (`dB = A^T dC`).
pub fn matmul_ta(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    let mut out = vec![0.0; k * n];
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let c_row = &c[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &c_pj) in out_row.iter_mut().zip(c_row.iter()) {
                *o += a_pi * c_pj;
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Backward for [`softmax_rows`]: `dx = y * (dy - <dy, y>)` per row,
/// where `y` is the forward output.
pub fn softmax_backward_rows(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let mut dot = 0.0;
        for (&yv, &dv) in y_row.iter().zip(dy_row.iter()) {
            dot += yv * dv;
        }
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((o, &yv), &dv) in dx_row.iter_mut().zip(y_row.iter()).zip(dy_row.iter()) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

/// Row-wise log-softmax: `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            *o = v - log_z;
        }
    }
    out
}

/// Backward for [`log_softmax_rows`]: `dx = dy - softmax * sum(dy)` per
/// row. The softmax is recovered as `exp(y)` from the forward output.
pub fn log_softmax_backward_rows(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let sum: f64 = dy_row.iter().sum();
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((o, &yv), &dv) in dx_row.iter_mut().zip(y_row.iter()).zip(dy_row.iter()) {
            *o = dv - yv.exp() * sum;
        }
    }
    dx
}

/// Row-wise layer normalisation with learned gain and bias:
/// `y = (x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> Vec<f64> {
    debug_assert_eq!(gain.len(), cols);
    debug_assert_eq!(bias.len(), cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let (mean, inv_std) = row_moments(row, eps);
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for (c, (o, &v)) in out_row.iter_mut().zip(row.iter()).enumerate() {
            *o = (v - mean) * inv_std * gain[c] + bias[c];
        }
    }
    out
}

/// Backward for [`layer_norm_rows`]. Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward_rows(
    x: &[f64],
    gain: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * cols];
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let n = cols as f64;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let (mean, inv_std) = row_moments(row, eps);
        // dL/dxhat_c = dy_c * gain_c; then the standard two-reduction form:
        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..cols {
            let xh = (row[c] - mean) * inv_std;
            let dxh = dy_row[c] * gain[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            dgain[c] += dy_row[c] * xh;
            dbias[c] += dy_row[c];
        }
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let xh = (row[c] - mean) * inv_std;
            let dxh = dy_row[c] * gain[c];
            dx_row[c] = inv_std * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
        }
    }
    (dx, dgain, dbias)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
