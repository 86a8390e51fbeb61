//! f64 reference implementations used as finite-difference oracles.
//!
//! These are deliberately naive loops, written independently of the crate's
//! sgemm-backed kernels.
#![allow(dead_code)]

pub const LN_EPS: f64 = 1e-5;

pub fn to64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn add_row(x: &mut [f64], row: &[f64]) {
    let c = row.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += row[i % c];
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols).flat_map(softmax).collect()
}

pub fn layer_norm(x: &[f64], cols: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for r in x.chunks(cols) {
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..cols {
            out.push((r[j] - mean) * rstd * g[j] + b[j]);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

/// Multi-head attention with optional constant past rows.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    m: usize,
    keys: &[f64],
    vals: &[f64],
    n_keys: usize,
    past: usize,
    width: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; m * width];
    for h in 0..heads {
        for i in 0..m {
            let vis = if causal { (past + i + 1).min(n_keys) } else { n_keys };
            let mut s = Vec::with_capacity(vis);
            for j in 0..vis {
                let mut d = 0.0;
                for t in 0..dh {
                    d += q[i * width + h * dh + t] * keys[j * width + h * dh + t];
                }
                s.push(d * scale);
            }
            let a = softmax(&s);
            for j in 0..vis {
                for t in 0..dh {
                    out[i * width + h * dh + t] += a[j] * vals[j * width + h * dh + t];
                }
            }
        }
    }
    out
}

/// Σ −log softmax(row)[label] over labelled rows.
pub fn cross_entropy(logits: &[f64], cols: usize, labels: &[Option<u32>]) -> f64 {
    let mut total = 0.0;
    for (r, l) in logits.chunks(cols).zip(labels) {
        if let Some(y) = l {
            let p = softmax(r);
            total -= p[*y as usize].ln();
        }
    }
    total
}

/// Central difference of `f` with respect to coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Full central-difference gradient.
pub fn numeric_grad(x: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len()).map(|i| central_diff(&mut x, i, h, f)).collect()
}

/// ‖a − b‖₂ / ‖b‖₂ (or absolute norm when b vanishes).
pub fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}
