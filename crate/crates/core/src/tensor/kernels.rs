//! Raw numeric kernels shared by the eager API and the autograd graph.

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// `c = alpha * a·b + beta * c` over strided views.
///
/// `a` is m×k with strides (rsa, csa), `b` is k×n, `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * rsc + j * csc];
                *x = if beta == 0.0 { 0.0 } else { *x * beta };
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{what}: expected 2-D tensor, got {s:?}"))),
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d(a, "matmul lhs")?;
    let (k2, n) = check_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions {k} and {k2} disagree"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), k, 1, b.data(), n, 1, 0.0, &mut out, n, 1);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = out.cols();
    if c > 0 {
        out.data_mut().chunks_mut(c).for_each(softmax_in_place);
    }
    out
}

pub(crate) fn softmax_backward(y: &[f32], dy: &[f32], cols: usize, dx: &mut [f32]) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f32 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o += yv * (dv - dot);
        }
    }
}

/// Forward layer norm; returns output plus per-row (mean, rstd) for backward.
pub(crate) fn layer_norm_forward(
    x: &[f32],
    cols: usize,
    gain: &[f32],
    bias: &[f32],
) -> (Vec<f32>, Vec<(f32, f32)>) {
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = xr.iter().sum::<f32>() / cols as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..cols {
            or[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Accumulates layer-norm input/gain/bias gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: &[f32],
    cols: usize,
    gain: &[f32],
    stats: &[(f32, f32)],
    dy: &[f32],
    dx: Option<&mut [f32]>,
    dgain: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
) {
    let n = cols as f32;
    let mut dx = dx;
    let mut dgain = dgain;
    let mut dbias = dbias;
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for (r, (xr, dyr)) in x.chunks(cols).zip(dy.chunks(cols)).enumerate() {
        let (mean, rstd) = stats[r];
        for j in 0..cols {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gain[j];
        }
        if let Some(g) = dgain.as_deref_mut() {
            for j in 0..cols {
                g[j] += dyr[j] * xhat[j];
            }
        }
        if let Some(b) = dbias.as_deref_mut() {
            for j in 0..cols {
                b[j] += dyr[j];
            }
        }
        if let Some(d) = dx.as_deref_mut() {
            let m1 = dxhat.iter().sum::<f32>() / n;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / n;
            let dr = &mut d[r * cols..(r + 1) * cols];
            for j in 0..cols {
                dr[j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
}

/// Layer norm over the last dimension with affine gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Dimension(format!(
            "layer_norm: last dim {c}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let (out, _) = layer_norm_forward(x.data(), c, gain.data(), bias.data());
    Tensor::new(x.shape().to_vec(), out)
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximated GELU, evaluated as `x · σ(2u)` since `½(1 + tanh u) = σ(2u)`.
pub fn gelu_scalar(x: f32) -> f32 {
    x * gate(x)
}

fn gate(x: f32) -> f32 {
    let u = GELU_K * (x + 0.044_715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let s = gate(x);
    let du = GELU_K * (1.0 + 3.0 * 0.044_715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Geometry of a multi-head attention call.
///
/// Queries are `m` rows; keys/values are `past` cached rows followed by
/// `fresh` new rows. With `causal`, query `i` sits at absolute position
/// `past + i` and sees keys `0..=past + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub m: usize,
    pub past: usize,
    pub fresh: usize,
    pub width: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnDims {
    pub fn keys(&self) -> usize {
        self.past + self.fresh
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (self.past + i + 1).min(self.keys())
        } else {
            self.keys()
        }
    }
}

/// Returns (output m×width, attention probabilities heads×m×keys).
pub(crate) fn attention_forward(
    dims: AttnDims,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    past: Option<(&[f32], &[f32])>,
) -> (Vec<f32>, Vec<f32>) {
    let AttnDims { m, past: p, fresh, width, heads, .. } = dims;
    let t = dims.keys();
    let dh = dims.head_width();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0; heads * m * t];
    let mut out = vec![0.0; m * width];
    for h in 0..heads {
        let off = h * dh;
        let ph = &mut probs[h * m * t..(h + 1) * m * t];
        if let Some((pk, _)) = past {
            if p > 0 {
                gemm(m, dh, p, scale, &q[off..], width, 1, &pk[off..], 1, width, 0.0, ph, t, 1);
            }
        }
        if fresh > 0 {
            gemm(m, dh, fresh, scale, &q[off..], width, 1, &k[off..], 1, width, 0.0, &mut ph[p..], t, 1);
        }
        for i in 0..m {
            let vis = dims.visible(i);
            let row = &mut ph[i * t..(i + 1) * t];
            softmax_in_place(&mut row[..vis]);
            row[vis..].iter_mut().for_each(|x| *x = 0.0);
        }
        if let Some((_, pv)) = past {
            if p > 0 {
                gemm(m, p, dh, 1.0, ph, t, 1, &pv[off..], width, 1, 0.0, &mut out[off..], width, 1);
            }
        }
        if fresh > 0 {
            gemm(m, fresh, dh, 1.0, &ph[p..], t, 1, &v[off..], width, 1, 1.0, &mut out[off..], width, 1);
        }
    }
    (out, probs)
}

/// Gradients for q, fresh k and fresh v. Cached rows are constants.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    dims: AttnDims,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    past: Option<(&[f32], &[f32])>,
    probs: &[f32],
    dout: &[f32],
    dq: Option<&mut [f32]>,
    dk: Option<&mut [f32]>,
    dv: Option<&mut [f32]>,
) {
    let AttnDims { m, past: p, fresh, width, heads, .. } = dims;
    let t = dims.keys();
    let dh = dims.head_width();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = dq;
    let mut dk = dk;
    let mut dv = dv;
    let mut ds = vec![0.0; m * t];
    for h in 0..heads {
        let off = h * dh;
        let ph = &probs[h * m * t..(h + 1) * m * t];
        if let Some(dv) = dv.as_deref_mut() {
            // dV = Aᵀ·dOut over fresh columns
            gemm(fresh, m, dh, 1.0, &ph[p..], 1, t, &dout[off..], width, 1, 1.0, &mut dv[off..], width, 1);
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        // dA = dOut·Vᵀ
        if let Some((_, pv)) = past {
            if p > 0 {
                gemm(m, dh, p, 1.0, &dout[off..], width, 1, &pv[off..], 1, width, 0.0, &mut ds, t, 1);
            }
        }
        if fresh > 0 {
            gemm(m, dh, fresh, 1.0, &dout[off..], width, 1, &v[off..], 1, width, 0.0, &mut ds[p..], t, 1);
        }
        for i in 0..m {
            let a = &ph[i * t..(i + 1) * t];
            let d = &mut ds[i * t..(i + 1) * t];
            let dot: f32 = a.iter().zip(d.iter()).map(|(x, y)| x * y).sum();
            for j in 0..t {
                d[j] = a[j] * (d[j] - dot);
            }
        }
        if let Some(dq) = dq.as_deref_mut() {
            if let Some((pk, _)) = past {
                if p > 0 {
                    gemm(m, p, dh, scale, &ds, t, 1, &pk[off..], width, 1, 1.0, &mut dq[off..], width, 1);
                }
            }
            if fresh > 0 {
                gemm(m, fresh, dh, scale, &ds[p..], t, 1, &k[off..], width, 1, 1.0, &mut dq[off..], width, 1);
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(fresh, m, dh, scale, &ds[p..], 1, t, &q[off..], width, 1, 1.0, &mut dk[off..], width, 1);
        }
    }
}

/// Multi-head scaled dot-product attention `softmax(q·kᵀ/√d_head)·v`.
pub fn attention_multihead(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let (m, width) = check_2d(q, "attention q")?;
    let (n, kw) = check_2d(k, "attention k")?;
    let (nv, vw) = check_2d(v, "attention v")?;
    if kw != width || vw != width || n != nv {
        return Err(Error::Dimension(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::Dimension(format!(
            "attention: width {width} not divisible by {heads} heads"
        )));
    }
    let dims = AttnDims { m, past: 0, fresh: n, width, heads, causal };
    let (out, _) = attention_forward(dims, q.data(), k.data(), v.data(), None);
    Tensor::new(vec![m, width], out)
}

/// Single-head attention.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    attention_multihead(q, k, v, 1, causal)
}

/// `-ln p[label]` for one probability row.
pub fn cross_entropy(prob_row: &[f32], label: usize) -> Result<f32> {
    let p = prob_row.get(label).ok_or_else(|| {
        Error::Index(format!("label {label} outside vocabulary of {}", prob_row.len()))
    })?;
    Ok(-p.ln())
}

/// Log-softmax of a logit row evaluated at `label`.
pub(crate) fn log_prob(logits: &[f32], label: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
    logits[label] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_projector() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(
            matmul(&p, &b).unwrap(),
            Tensor::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]])
        );
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
        let s = softmax_rows(&Tensor::from_rows(&[vec![2f32.ln(), 0.0]]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]), &g, &b).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::from_rows(&[vec![1.0, -1.0]]), &g, &b).unwrap();
        let expect = 1.0 / (1.0f32 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-7);
        assert!((y.data()[1] + expect).abs() < 1e-7);
        assert!(layer_norm(&Tensor::zeros(&[1, 4]), &g, &b).is_err());
    }

    #[test]
    fn attention_single_entry() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let v = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let out = attention(&q, &q, &v, false).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn causal_position_zero_ignores_later_keys() {
        let q = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.1]]);
        let k1 = Tensor::from_rows(&[vec![0.1, 0.4], vec![0.9, -0.7]]);
        let v1 = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let k2 = Tensor::from_rows(&[vec![0.1, 0.4], vec![-5.0, 8.0]]);
        let v2 = Tensor::from_rows(&[vec![1.0, 2.0], vec![-9.0, 7.0]]);
        let a = attention(&q, &k1, &v1, true).unwrap();
        let b = attention(&q, &k2, &v2, true).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn attention_dimension_errors() {
        let q = Tensor::zeros(&[2, 4]);
        let k = Tensor::zeros(&[3, 2]);
        assert!(attention(&q, &k, &k, false).is_err());
        assert!(attention_multihead(&q, &q, &q, 3, false).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let u = cross_entropy(&[0.25; 4], 2).unwrap();
        assert!((u - 4f32.ln()).abs() < 1e-6);
        let h = cross_entropy(&[0.5, 0.25, 0.25], 1).unwrap();
        assert!((h - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(Error::Index(_))));
    }
}
