//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use opendec_core::corpus::TokenId;
use opendec_core::model::{forward, loss, loss_and_grad, ModelConfig, Modulation, Parameters};
use opendec_core::prompting::{PromptBuilder, ScoreMatrix, SegmentedPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Initialized parameters with every entry perturbed by `U(-spread, spread)`
/// so layer norms, biases and attention patterns are far from trivial.
pub fn perturbed_params(cfg: &ModelConfig, spread: f64, seed: u64) -> Parameters {
    let mut p = Parameters::init(cfg).unwrap();
    let mut r = rng(seed);
    for x in &mut p.data {
        *x += r.gen_range(-spread..spread);
    }
    p
}

fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| r.gen_range(4..vocab as TokenId)).collect()
}

/// Random prompt with the given instruction, document, query and answer
/// body lengths.
pub fn toy_prompt(
    r: &mut ChaCha8Rng,
    vocab: usize,
    instr: usize,
    docs: &[usize],
    query: usize,
    answer: Option<usize>,
) -> SegmentedPrompt {
    let instruction = random_tokens(r, vocab, instr);
    let docs: Vec<Vec<TokenId>> = docs.iter().map(|&l| random_tokens(r, vocab, l)).collect();
    let doc_refs: Vec<&[TokenId]> = docs.iter().map(|d| d.as_slice()).collect();
    let q = random_tokens(r, vocab, query);
    let a = answer.map(|l| random_tokens(r, vocab, l));
    PromptBuilder::new(instruction, 10_000).build(&doc_refs, &q, a.as_deref()).unwrap()
}

/// Straight-line attention: forms the full logit matrix, modulates, masks
/// with -inf, and softmaxes each row with no shortcuts.
pub fn brute_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d_k: usize,
    s: &[f64],
    n: usize,
    causal: bool,
    mode: Modulation,
) -> (Vec<f64>, Vec<f64>) {
    let d_v = v.len() / n;
    let mut logits = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for c in 0..d_k {
                acc += q[i * d_k + c] * k[j * d_k + c];
            }
            let l = acc / (d_k as f64).sqrt();
            logits[i][j] = match mode {
                Modulation::Multiplicative => s[i * n + j] * l,
                Modulation::AdditiveVariant => l + s[i * n + j].ln(),
                Modulation::Off => l,
            };
            if causal && j > i {
                logits[i][j] = f64::NEG_INFINITY;
            }
        }
    }
    let mut weights = vec![0.0; n * n];
    let mut out = vec![0.0; n * d_v];
    for i in 0..n {
        let m = logits[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits[i].iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            weights[i * n + j] = (logits[i][j] - m).exp() / z;
        }
        for j in 0..n {
            for c in 0..d_v {
                out[i * d_v + c] += weights[i * n + j] * v[j * d_v + c];
            }
        }
    }
    (out, weights)
}

/// Loss recomputed from the full per-position logits with an explicit
/// log-softmax at each answer-predicting position.
pub fn brute_loss(params: &Parameters, prompt: &SegmentedPrompt, s: &ScoreMatrix) -> f64 {
    let logits = forward(params, prompt, s).unwrap();
    let a = prompt.answer_segment().unwrap();
    let mut total = 0.0;
    for j in a.start..a.end {
        let row = logits.row(j - 1);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
        let target = prompt.tokens[j] as usize;
        total -= row[target] - m - z.ln();
    }
    total / (a.end - a.start) as f64
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    // Tensors whose true gradient vanishes (e.g. key biases when a row-wise
    // shift cannot change the softmax) leave only roundoff on both sides;
    // compare those absolutely.
    if denom < 1e-8 {
        diff
    } else {
        diff / denom
    }
}

/// Central differences with step `h` for every parameter and every lower
/// triangular entry of a dense `S`. Returns `(tensor name, relative error)`
/// pairs, with the score-matrix path reported as `"S"`.
pub fn gradient_check(params: &Parameters, prompt: &SegmentedPrompt, s_dense: &[f64], h: f64) -> Vec<(String, f64)> {
    let n = prompt.tokens.len();
    let s = ScoreMatrix::dense(n, s_dense.to_vec()).unwrap();
    let analytic = loss_and_grad(params, prompt, &s, true).unwrap();
    let mut work = params.clone();
    let mut out = Vec::new();
    for t in &params.layout.tensors {
        let mut numeric = Vec::with_capacity(t.len());
        for i in t.range() {
            let orig = work.data[i];
            work.data[i] = orig + h;
            let lp = loss(&work, prompt, &s).unwrap();
            work.data[i] = orig - h;
            let lm = loss(&work, prompt, &s).unwrap();
            work.data[i] = orig;
            numeric.push((lp - lm) / (2.0 * h));
        }
        out.push((t.name.clone(), rel_err(&analytic.grad[t.range()], &numeric)));
    }
    let mut numeric = Vec::new();
    let mut analytic_s = Vec::new();
    for i in 0..n {
        for j in 0..=i {
            let mut e = s_dense.to_vec();
            e[i * n + j] += h;
            let lp = loss(params, prompt, &ScoreMatrix::dense(n, e.clone()).unwrap()).unwrap();
            e[i * n + j] -= 2.0 * h;
            let lm = loss(params, prompt, &ScoreMatrix::dense(n, e).unwrap()).unwrap();
            numeric.push((lp - lm) / (2.0 * h));
            analytic_s.push(analytic.ds[i * n + j]);
        }
    }
    out.push(("S".into(), rel_err(&analytic_s, &numeric)));
    out
}

/// Config and prompt used by the gradient-fidelity checks: two layers,
/// d_model 32 and a 12-token prompt.
pub fn gradient_fixture(seed: u64, mode: Modulation) -> (Parameters, SegmentedPrompt, Vec<f64>) {
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 48,
        max_context: 16,
        seed,
        modulation: mode,
        ..ModelConfig::new(24)
    };
    let params = perturbed_params(&cfg, 0.3, seed + 100);
    let mut r = rng(seed + 200);
    // BOS + 2 + SEP | 2 + SEP | 1 + SEP | 2 + EOS = 12 tokens
    let prompt = toy_prompt(&mut r, cfg.vocab_size, 2, &[2], 1, Some(2));
    assert_eq!(prompt.tokens.len(), 12);
    let n = prompt.tokens.len();
    let s: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.2..1.0)).collect();
    (params, prompt, s)
}
