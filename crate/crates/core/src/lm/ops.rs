//! Dense kernels over row-major `f64` slices.
//!
//! Every kernel accumulates each output element in a fixed order that does
//! not depend on the number of rows, so a row computed alone is bit-identical
//! to the same row computed inside a batch.

pub const LN_EPS: f64 = 1e-5;

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn matmul_at_acc(a: &[f64], m: usize, k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, o_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `g[m×n] · bᵀ` for `b[k×n]`, giving `m×k`.
pub fn matmul_bt(g: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    for (g_row, o_row) in g.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, b_row) in o_row.iter_mut().zip(b.chunks_exact(n)) {
            *o = dot(g_row, b_row);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Bias gradient: column sums of `g[m×n]` accumulated into `out`.
pub fn col_sum_acc(g: &[f64], n: usize, out: &mut [f64]) {
    for row in g.chunks_exact(n) {
        add_assign(out, row);
    }
}

/// Per-row layer norm. Returns the output plus `(x̂, 1/σ)` for backward.
pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, rstd)
}

/// Backward through layer norm; accumulates gain/bias grads and returns dx.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_x = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            let g = dyr[j] * gain[j];
            mean_dxhat += g;
            mean_dxhat_x += g * xr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_x /= d as f64;
        for j in 0..d {
            let g = dyr[j] * gain[j];
            dx[r * d + j] = rs * (g - mean_dxhat - xr[j] * mean_dxhat_x);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}
