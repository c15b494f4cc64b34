//! Score-modulated scaled dot-product attention for a single head.
//!
//! Logits `L = QK^T / sqrt(d_k)` are combined with the score matrix `S`
//! first; the causal mask is applied afterwards so masked positions carry
//! exactly zero probability whatever `S` holds.

use super::config::Modulation;
use crate::error::{Error, Result};
use crate::prompting::ScoreMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `n x d_v` context vectors.
    pub context: Vec<f64>,
    /// `n x n` post-softmax weights; masked entries are exactly zero.
    pub weights: Vec<f64>,
    /// `n x n` scaled logits before modulation (zero where masked).
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    /// `n x n` gradient with respect to the score matrix entries.
    pub ds: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn modulate(logit: f64, s: f64, mode: Modulation) -> f64 {
    match mode {
        Modulation::Multiplicative => s * logit,
        Modulation::AdditiveVariant => logit + s.ln(),
        Modulation::Off => logit,
    }
}

fn check_shapes(q: &[f64], k: &[f64], v: &[f64], n: usize, d_k: usize, d_v: usize, s: &ScoreMatrix) -> Result<()> {
    if q.len() != n * d_k || k.len() != n * d_k {
        return Err(Error::Shape(format!(
            "Q/K must be {n}x{d_k}, got {} and {} entries",
            q.len(),
            k.len()
        )));
    }
    if v.len() != n * d_v {
        return Err(Error::Shape(format!("V must be {n}x{d_v}, got {} entries", v.len())));
    }
    if s.n() != n {
        return Err(Error::Shape(format!("score matrix is {0}x{0}, sequence has {n} tokens", s.n())));
    }
    Ok(())
}

/// `softmax(mask(S ∘ QK^T / sqrt(d_k))) V` for row-major `Q, K (n x d_k)` and
/// `V (n x d_v)`.
pub fn modulated_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d_k: usize,
    s: &ScoreMatrix,
    causal: bool,
    mode: Modulation,
) -> Result<AttentionOutput> {
    let n = s.n();
    if d_k == 0 {
        return Err(Error::Shape("d_k must be >= 1".into()));
    }
    let d_v = if n == 0 { 0 } else { v.len() / n };
    check_shapes(q, k, v, n, d_k, d_v, s)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut weights = vec![0.0; n * n];
    let mut logits = vec![0.0; n * n];
    let mut context = vec![0.0; n * d_v];
    for i in 0..n {
        let qi = &q[i * d_k..(i + 1) * d_k];
        let srow = s.row(i);
        let width = if causal { i + 1 } else { n };
        let lrow = &mut logits[i * n..i * n + width];
        let wrow = &mut weights[i * n..i * n + width];
        let mut max = f64::NEG_INFINITY;
        for j in 0..width {
            let l = dot(qi, &k[j * d_k..(j + 1) * d_k]) * scale;
            lrow[j] = l;
            let m = modulate(l, srow[j], mode);
            wrow[j] = m;
            max = max.max(m);
        }
        let mut total = 0.0;
        for w in wrow.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        let ctx = &mut context[i * d_v..(i + 1) * d_v];
        for (j, w) in wrow.iter_mut().enumerate() {
            *w /= total;
            axpy(ctx, *w, &v[j * d_v..(j + 1) * d_v]);
        }
    }
    Ok(AttentionOutput {
        context,
        weights,
        logits,
    })
}

/// Reverse-mode pass through [`modulated_attention`] given the upstream
/// gradient of the context.
#[allow(clippy::too_many_arguments)]
pub fn modulated_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d_k: usize,
    s: &ScoreMatrix,
    causal: bool,
    mode: Modulation,
    out: &AttentionOutput,
    dcontext: &[f64],
    want_ds: bool,
) -> AttentionGrads {
    let n = s.n();
    let d_v = if n == 0 { 0 } else { v.len() / n };
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut dq = vec![0.0; n * d_k];
    let mut dk = vec![0.0; n * d_k];
    let mut dv = vec![0.0; n * d_v];
    let mut ds = if want_ds { vec![0.0; n * n] } else { Vec::new() };
    let mut dp = vec![0.0; n];
    for i in 0..n {
        let width = if causal { i + 1 } else { n };
        let wrow = &out.weights[i * n..i * n + width];
        let lrow = &out.logits[i * n..i * n + width];
        let srow = s.row(i);
        let dctx = &dcontext[i * d_v..(i + 1) * d_v];
        let mut inner = 0.0;
        for j in 0..width {
            let vj = &v[j * d_v..(j + 1) * d_v];
            dp[j] = dot(dctx, vj);
            inner += wrow[j] * dp[j];
            axpy(&mut dv[j * d_v..(j + 1) * d_v], wrow[j], dctx);
        }
        let qi = &q[i * d_k..(i + 1) * d_k];
        for j in 0..width {
            let dm = wrow[j] * (dp[j] - inner);
            if dm == 0.0 {
                continue;
            }
            let dl = match mode {
                Modulation::Multiplicative => {
                    if want_ds {
                        ds[i * n + j] = dm * lrow[j];
                    }
                    dm * srow[j]
                }
                Modulation::AdditiveVariant => {
                    if want_ds {
                        ds[i * n + j] = dm / srow[j];
                    }
                    dm
                }
                Modulation::Off => dm,
            } * scale;
            axpy(&mut dq[i * d_k..(i + 1) * d_k], dl, &k[j * d_k..(j + 1) * d_k]);
            axpy(&mut dk[j * d_k..(j + 1) * d_k], dl, qi);
        }
    }
    AttentionGrads { dq, dk, dv, ds }
}
