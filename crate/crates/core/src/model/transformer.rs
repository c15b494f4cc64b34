//! Pre-norm decoder stack with hand-written reverse mode.
//!
//! Every self-attention layer and head uses the same score matrix. The loss
//! is the mean negative log-likelihood of the answer tokens (including the
//! closing EOS) under teacher forcing; logits are only materialized at the
//! positions that predict an answer token.

use serde::{Deserialize, Serialize};

use super::attention::{axpy, dot, modulated_attention, modulated_attention_backward, AttentionOutput};
use super::config::Modulation;
use super::params::{BlockOffsets, Parameters};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::prompting::{ScoreMatrix, SegmentedPrompt};

const LN_EPS: f64 = 1e-5;

/// Row-major `n x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub n: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Post-softmax attention weights, indexed `[layer][head]`, each `n x n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub n: usize,
    pub weights: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// Same layout as [`Parameters::data`].
    pub grad: Vec<f64>,
    /// `n x n` gradient with respect to the score matrix (empty unless requested).
    pub ds: Vec<f64>,
}

struct LnCache {
    out: Vec<f64>,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    heads: Vec<HeadCache>,
    ctx: Vec<f64>,
    ln2: LnCache,
    u: Vec<f64>,
    act: Vec<f64>,
}

struct HeadCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    out: AttentionOutput,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], n: usize, d: usize) -> LnCache {
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            out[i * d + c] = h * g[c] + b[c];
        }
    }
    LnCache { out, xhat, rstd }
}

fn layer_norm_backward(cache: &LnCache, g: &[f64], dy: &[f64], n: usize, d: usize, dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        let dxr = &mut dx[i * d..(i + 1) * d];
        for c in 0..d {
            dxr[c] += r * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

/// `out = a W + b` for `a: n x din`, `W: din x dout`.
fn linear(a: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let orow = &mut out[i * dout..(i + 1) * dout];
        orow.copy_from_slice(b);
        for (kk, &aik) in a[i * din..(i + 1) * din].iter().enumerate() {
            if aik != 0.0 {
                axpy(orow, aik, &w[kk * dout..(kk + 1) * dout]);
            }
        }
    }
    out
}

/// Accumulates `dW += a^T dy`, `db += sum dy` and `da += dy W^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    a: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    da: Option<&mut [f64]>,
) {
    for i in 0..n {
        let dyr = &dy[i * dout..(i + 1) * dout];
        axpy(db, 1.0, dyr);
        for (kk, &aik) in a[i * din..(i + 1) * din].iter().enumerate() {
            if aik != 0.0 {
                axpy(&mut dw[kk * dout..(kk + 1) * dout], aik, dyr);
            }
        }
    }
    if let Some(da) = da {
        for i in 0..n {
            let dyr = &dy[i * dout..(i + 1) * dout];
            let dar = &mut da[i * din..(i + 1) * din];
            for (kk, dak) in dar.iter_mut().enumerate() {
                *dak += dot(dyr, &w[kk * dout..(kk + 1) * dout]);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn split_head(m: &[f64], n: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&m[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn merge_head(dst: &mut [f64], src: &[f64], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        let d_row = &mut dst[i * d + h * dh..i * d + (h + 1) * dh];
        for (x, y) in d_row.iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *x += y;
        }
    }
}

fn validate(params: &Parameters, tokens: &[TokenId], s: &ScoreMatrix) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_context {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            limit: cfg.max_context,
            detail: "forward pass".into(),
        });
    }
    if s.n() != tokens.len() {
        return Err(Error::Shape(format!(
            "score matrix is {0}x{0} for {1} tokens",
            s.n(),
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

struct Stack {
    /// Residual stream after the last block, `n x d`.
    x: Vec<f64>,
    blocks: Vec<BlockCache>,
}

fn run_blocks(params: &Parameters, tokens: &[TokenId], s: &ScoreMatrix, mode: Modulation) -> Stack {
    let cfg = &params.config;
    let (n, d, f, nh) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
    let dh = d / nh;
    let p = &params.data;
    let lay = &params.layout;
    let mut x = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        let te = &p[lay.wte + t as usize * d..lay.wte + (t as usize + 1) * d];
        let pe = &p[lay.wpe + i * d..lay.wpe + (i + 1) * d];
        for c in 0..d {
            row[c] = te[c] + pe[c];
        }
    }
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for b in &lay.blocks {
        let w = |off: usize, len: usize| &p[off..off + len];
        let ln1 = layer_norm(&x, w(b.ln1_g, d), w(b.ln1_b, d), n, d);
        let q = linear(&ln1.out, w(b.wq, d * d), w(b.bq, d), n, d, d);
        let k = linear(&ln1.out, w(b.wk, d * d), w(b.bk, d), n, d, d);
        let v = linear(&ln1.out, w(b.wv, d * d), w(b.bv, d), n, d, d);
        let mut ctx = vec![0.0; n * d];
        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let (qh, kh, vh) = (split_head(&q, n, d, h, dh), split_head(&k, n, d, h, dh), split_head(&v, n, d, h, dh));
            let out = modulated_attention(&qh, &kh, &vh, dh, s, true, mode).expect("shapes validated");
            merge_head(&mut ctx, &out.context, n, d, h, dh);
            heads.push(HeadCache { q: qh, k: kh, v: vh, out });
        }
        let y = linear(&ctx, w(b.wo, d * d), w(b.bo, d), n, d, d);
        axpy(&mut x, 1.0, &y);
        let ln2 = layer_norm(&x, w(b.ln2_g, d), w(b.ln2_b, d), n, d);
        let u = linear(&ln2.out, w(b.w1, d * f), w(b.b1, f), n, d, f);
        let act: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let z = linear(&act, w(b.w2, f * d), w(b.b2, d), n, f, d);
        axpy(&mut x, 1.0, &z);
        blocks.push(BlockCache {
            ln1,
            heads,
            ctx,
            ln2,
            u,
            act,
        });
    }
    Stack { x, blocks }
}

/// Final layer norm and tied unembedding at selected positions.
fn head_logits(params: &Parameters, x: &[f64], positions: &[usize]) -> (LnCache, Vec<f64>) {
    let cfg = &params.config;
    let (d, vsz) = (cfg.d_model, cfg.vocab_size);
    let p = &params.data;
    let lay = &params.layout;
    let rows: Vec<f64> = positions.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
    let ln = layer_norm(&rows, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d], positions.len(), d);
    let wte = &p[lay.wte..lay.wte + vsz * d];
    let mut logits = vec![0.0; positions.len() * vsz];
    for r in 0..positions.len() {
        let h = &ln.out[r * d..(r + 1) * d];
        for (t, l) in logits[r * vsz..(r + 1) * vsz].iter_mut().enumerate() {
            *l = dot(h, &wte[t * d..(t + 1) * d]);
        }
    }
    (ln, logits)
}

/// Next-token logits for every position, using the configured modulation.
pub fn forward(params: &Parameters, prompt: &SegmentedPrompt, s: &ScoreMatrix) -> Result<Logits> {
    forward_tokens(params, &prompt.tokens, s, params.config.modulation)
}

/// Next-token logits for every position under an explicit modulation mode.
pub fn forward_tokens(params: &Parameters, tokens: &[TokenId], s: &ScoreMatrix, mode: Modulation) -> Result<Logits> {
    validate(params, tokens, s)?;
    let stack = run_blocks(params, tokens, s, mode);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let (_, data) = head_logits(params, &stack.x, &positions);
    Ok(Logits {
        n: tokens.len(),
        vocab: params.config.vocab_size,
        data,
    })
}

/// Logits at the final position only.
pub fn last_logits(params: &Parameters, tokens: &[TokenId], s: &ScoreMatrix) -> Result<Vec<f64>> {
    validate(params, tokens, s)?;
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    let stack = run_blocks(params, tokens, s, params.config.modulation);
    Ok(head_logits(params, &stack.x, &[tokens.len() - 1]).1)
}

pub fn attention_trace(params: &Parameters, tokens: &[TokenId], s: &ScoreMatrix) -> Result<AttentionTrace> {
    validate(params, tokens, s)?;
    let stack = run_blocks(params, tokens, s, params.config.modulation);
    Ok(AttentionTrace {
        n: tokens.len(),
        weights: stack
            .blocks
            .into_iter()
            .map(|b| b.heads.into_iter().map(|h| h.out.weights).collect())
            .collect(),
    })
}

/// `(position, target)` pairs whose loss terms make up the objective.
pub(crate) fn answer_targets(prompt: &SegmentedPrompt) -> Result<Vec<(usize, TokenId)>> {
    let a = prompt.answer_segment().ok_or(Error::MissingAnswer)?;
    if a.start == 0 || a.is_empty() {
        return Err(Error::MissingAnswer);
    }
    Ok((a.start..a.end).map(|j| (j - 1, prompt.tokens[j])).collect())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood over the answer segment.
pub fn loss(params: &Parameters, prompt: &SegmentedPrompt, s: &ScoreMatrix) -> Result<f64> {
    let targets = answer_targets(prompt)?;
    validate(params, &prompt.tokens, s)?;
    let stack = run_blocks(params, &prompt.tokens, s, params.config.modulation);
    let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let (_, logits) = head_logits(params, &stack.x, &positions);
    let v = params.config.vocab_size;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &(_, t))| {
            let row = &logits[r * v..(r + 1) * v];
            log_sum_exp(row) - row[t as usize]
        })
        .sum();
    Ok(total / targets.len() as f64)
}

/// Loss plus its gradient with respect to every parameter and, when
/// `want_ds` is set, every entry of the score matrix.
pub fn loss_and_grad(params: &Parameters, prompt: &SegmentedPrompt, s: &ScoreMatrix, want_ds: bool) -> Result<LossGrad> {
    let targets = answer_targets(prompt)?;
    let tokens = &prompt.tokens;
    validate(params, tokens, s)?;
    let cfg = &params.config;
    let mode = cfg.modulation;
    let (n, d, f, nh, vsz) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
    let dh = d / nh;
    let p = &params.data;
    let lay = &params.layout;

    let stack = run_blocks(params, tokens, s, mode);
    let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let (lnf, logits) = head_logits(params, &stack.x, &positions);

    let mut grad = vec![0.0; p.len()];
    let count = targets.len() as f64;
    let mut total = 0.0;
    // d loss / d (final-norm output) at the target rows
    let mut dh_rows = vec![0.0; positions.len() * d];
    let wte = &p[lay.wte..lay.wte + vsz * d];
    for (r, &(_, t)) in targets.iter().enumerate() {
        let row = &logits[r * vsz..(r + 1) * vsz];
        let lse = log_sum_exp(row);
        total += lse - row[t as usize];
        let h = &lnf.out[r * d..(r + 1) * d];
        let dhr = &mut dh_rows[r * d..(r + 1) * d];
        for (tok, &l) in row.iter().enumerate() {
            let mut g = (l - lse).exp();
            if tok == t as usize {
                g -= 1.0;
            }
            g /= count;
            if g != 0.0 {
                axpy(dhr, g, &wte[tok * d..(tok + 1) * d]);
                axpy(&mut grad[lay.wte + tok * d..lay.wte + (tok + 1) * d], g, h);
            }
        }
    }

    let mut drows = vec![0.0; positions.len() * d];
    {
        let (head, tail) = grad.split_at_mut(lay.lnf_b);
        layer_norm_backward(
            &lnf,
            &p[lay.lnf_g..lay.lnf_g + d],
            &dh_rows,
            positions.len(),
            d,
            &mut head[lay.lnf_g..lay.lnf_g + d],
            &mut tail[..d],
            &mut drows,
        );
    }
    let mut dx = vec![0.0; n * d];
    for (r, &pos) in positions.iter().enumerate() {
        axpy(&mut dx[pos * d..(pos + 1) * d], 1.0, &drows[r * d..(r + 1) * d]);
    }

    let mut ds = if want_ds { vec![0.0; n * n] } else { Vec::new() };
    for (bi, b) in lay.blocks.iter().enumerate().rev() {
        let cache = &stack.blocks[bi];
        block_backward(p, &mut grad, b, cache, s, mode, n, d, f, dh, &mut dx, if want_ds { Some(&mut ds) } else { None });
    }

    for (i, &t) in tokens.iter().enumerate() {
        let dxr = &dx[i * d..(i + 1) * d];
        axpy(&mut grad[lay.wte + t as usize * d..lay.wte + (t as usize + 1) * d], 1.0, dxr);
        axpy(&mut grad[lay.wpe + i * d..lay.wpe + (i + 1) * d], 1.0, dxr);
    }

    Ok(LossGrad {
        loss: total / count,
        grad,
        ds,
    })
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    p: &[f64],
    grad: &mut [f64],
    b: &BlockOffsets,
    cache: &BlockCache,
    s: &ScoreMatrix,
    mode: Modulation,
    n: usize,
    d: usize,
    f: usize,
    dh: usize,
    dx: &mut [f64],
    ds: Option<&mut Vec<f64>>,
) {
    let w = |off: usize, len: usize| &p[off..off + len];

    // feed-forward half: x_out = x_mid + act(ln2(x_mid) W1 + b1) W2 + b2
    let mut dact = vec![0.0; n * f];
    {
        let (dw2, db2) = two_slices(grad, b.w2, f * d, b.b2, d);
        linear_backward(&cache.act, w(b.w2, f * d), dx, n, f, d, dw2, db2, Some(&mut dact));
    }
    let du: Vec<f64> = dact.iter().zip(&cache.u).map(|(g, &u)| g * gelu_grad(u)).collect();
    let mut dln2 = vec![0.0; n * d];
    {
        let (dw1, db1) = two_slices(grad, b.w1, d * f, b.b1, f);
        linear_backward(&cache.ln2.out, w(b.w1, d * f), &du, n, d, f, dw1, db1, Some(&mut dln2));
    }
    {
        let (dg, db) = two_slices(grad, b.ln2_g, d, b.ln2_b, d);
        layer_norm_backward(&cache.ln2, w(b.ln2_g, d), &dln2, n, d, dg, db, dx);
    }

    // attention half: x_mid = x_in + attn(ln1(x_in)) Wo + bo
    let mut dctx = vec![0.0; n * d];
    {
        let (dwo, dbo) = two_slices(grad, b.wo, d * d, b.bo, d);
        linear_backward(&cache.ctx, w(b.wo, d * d), dx, n, d, d, dwo, dbo, Some(&mut dctx));
    }
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut ds = ds;
    for (h, head) in cache.heads.iter().enumerate() {
        let dctx_h = split_head(&dctx, n, d, h, dh);
        let g = modulated_attention_backward(&head.q, &head.k, &head.v, dh, s, true, mode, &head.out, &dctx_h, ds.is_some());
        merge_head(&mut dq, &g.dq, n, d, h, dh);
        merge_head(&mut dk, &g.dk, n, d, h, dh);
        merge_head(&mut dv, &g.dv, n, d, h, dh);
        if let Some(ds) = ds.as_deref_mut() {
            axpy(ds, 1.0, &g.ds);
        }
    }
    let mut dln1 = vec![0.0; n * d];
    for (wo, bo, dy) in [(b.wq, b.bq, &dq), (b.wk, b.bk, &dk), (b.wv, b.bv, &dv)] {
        let (dw, db) = two_slices(grad, wo, d * d, bo, d);
        linear_backward(&cache.ln1.out, w(wo, d * d), dy, n, d, d, dw, db, Some(&mut dln1));
    }
    let (dg, db) = two_slices(grad, b.ln1_g, d, b.ln1_b, d);
    layer_norm_backward(&cache.ln1, w(b.ln1_g, d), &dln1, n, d, dg, db, dx);
}

/// Two disjoint mutable windows `[a, a+la)` and `[b, b+lb)` with `a + la <= b`.
fn two_slices(buf: &mut [f64], a: usize, la: usize, b: usize, lb: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + la <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + la], &mut hi[..lb])
}
