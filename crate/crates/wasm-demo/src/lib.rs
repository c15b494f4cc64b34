//! Browser demo: normalization schemes, an attention heatmap under score
//! modulation, and noisy-list composition. The plain Rust functions do the
//! work; the `#[wasm_bindgen]` wrappers only move JSON across the boundary.

use opendec_core::corpus::{generate_corpus, UnkPolicy};
use opendec_core::indicators::{normalize, NormalizedScores, Scheme};
use opendec_core::model::{attention_trace, ModelConfig, Modulation, Parameters};
use opendec_core::prompting::{expand_scores, PromptBuilder};
use opendec_core::retrieval::Retriever;
use opendec_core::robustness::{build_noisy_list, NoisyListSpec, Order, Tag};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct SchemeRow {
    pub scheme: &'static str,
    pub values: Option<Vec<f64>>,
    pub error: Option<String>,
}

/// All three normalizations of one score list. A scheme that rejects the
/// input reports its error instead of values.
pub fn normalize_all(scores: &[f64]) -> Vec<SchemeRow> {
    [Scheme::Max, Scheme::MinMax, Scheme::ExpRank]
        .into_iter()
        .map(|scheme| match normalize(scores, scheme) {
            Ok(n) => SchemeRow {
                scheme: scheme.name(),
                values: Some(n.values),
                error: None,
            },
            Err(e) => SchemeRow {
                scheme: scheme.name(),
                values: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub labels: Vec<String>,
    /// Row-major `n x n` attention weights, averaged over heads of the
    /// first layer.
    pub weights: Vec<f64>,
    pub n: usize,
    /// Attention mass the final position gives each document.
    pub doc_mass: Vec<f64>,
}

const DEMO_VOCAB: usize = 32;

/// Attention of a small randomly initialized model over a toy prompt with
/// one three-token document per entry of `doc_scores`.
pub fn heatmap(doc_scores: &[f64], modulation: Modulation, seed: u64) -> Result<Heatmap, String> {
    if doc_scores.is_empty() || doc_scores.len() > 8 {
        return Err("give between 1 and 8 document scores".into());
    }
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_context: 64,
        seed,
        modulation,
        ..ModelConfig::new(DEMO_VOCAB)
    };
    let mut params = Parameters::init(&cfg).map_err(|e| e.to_string())?;
    // Sharpen the tiny init so the pattern is visible.
    params.data.iter_mut().for_each(|x| *x *= 25.0);
    let docs: Vec<Vec<u32>> = (0..doc_scores.len() as u32).map(|d| vec![4 + 3 * d % 28, 5 + d, 6 + 2 * d % 26]).collect();
    let doc_refs: Vec<&[u32]> = docs.iter().map(|d| d.as_slice()).collect();
    let mut prompt = PromptBuilder::new(vec![30], 64)
        .build(&doc_refs, &[31, 29], None)
        .map_err(|e| e.to_string())?;
    let s = expand_scores(
        &mut prompt,
        &NormalizedScores {
            values: doc_scores.to_vec(),
            scheme: Scheme::Max,
        },
    )
    .map_err(|e| e.to_string())?;
    let trace = attention_trace(&params, &prompt.tokens, &s).map_err(|e| e.to_string())?;
    let n = trace.n;
    let heads = &trace.weights[0];
    let weights: Vec<f64> = (0..n * n)
        .map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / heads.len() as f64)
        .collect();
    let mut labels = vec![String::new(); n];
    for seg in &prompt.segments {
        for (off, l) in labels[seg.start..seg.end].iter_mut().enumerate() {
            *l = format!("{}:{off}", seg.kind.label());
        }
    }
    let last = &weights[(n - 1) * n..];
    let doc_mass = prompt.doc_segments().map(|seg| last[seg.start..seg.end].iter().sum()).collect();
    Ok(Heatmap {
        labels,
        weights,
        n,
        doc_mass,
    })
}

#[derive(Debug, Serialize)]
pub struct DemoList {
    pub question: String,
    pub docs: Vec<DemoDoc>,
}

#[derive(Debug, Serialize)]
pub struct DemoDoc {
    pub position: usize,
    pub tag: Tag,
    pub score: f64,
    pub text: String,
}

/// A noisy list for the first question of a small generated corpus.
pub fn noisy_demo(spec: &NoisyListSpec) -> Result<DemoList, String> {
    let g = generate_corpus(7, 12, 2, 60).map_err(|e| e.to_string())?;
    let retriever = Retriever::new(&g.corpus, g.vocab.len(), 64).map_err(|e| e.to_string())?;
    let qa = &g.qas[0];
    let q = retriever.embed_query(qa, &g.vocab, UnkPolicy::Reject).map_err(|e| e.to_string())?;
    let ranking = retriever.retrieve(&qa.qa_id, &q, spec.total()).map_err(|e| e.to_string())?;
    let list = build_noisy_list(&ranking, &g.corpus, spec, |id| retriever.score(&q, id).unwrap_or(0.0))
        .map_err(|e| e.to_string())?;
    Ok(DemoList {
        question: qa.question.clone(),
        docs: list
            .docs
            .iter()
            .map(|d| DemoDoc {
                position: d.position,
                tag: d.tag,
                score: d.score,
                text: g.corpus.get(&d.doc_id).map(|doc| doc.text.clone()).unwrap_or_default(),
            })
            .collect(),
    })
}

fn to_js<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(|e| JsValue::from_str(&e.to_string()))
}

fn parse_scores(json: &str) -> Result<Vec<f64>, JsValue> {
    serde_json::from_str(json).map_err(|e| JsValue::from_str(&format!("scores must be a JSON number array: {e}")))
}

#[wasm_bindgen(js_name = normalizeScores)]
pub fn normalize_scores(scores_json: &str) -> Result<String, JsValue> {
    to_js(&normalize_all(&parse_scores(scores_json)?))
}

#[wasm_bindgen(js_name = attentionHeatmap)]
pub fn attention_heatmap(doc_scores_json: &str, modulation: &str, seed: u32) -> Result<String, JsValue> {
    let mode = match modulation {
        "multiplicative" => Modulation::Multiplicative,
        "additive-variant" => Modulation::AdditiveVariant,
        "off" => Modulation::Off,
        other => return Err(JsValue::from_str(&format!("unknown modulation `{other}`"))),
    };
    to_js(&heatmap(&parse_scores(doc_scores_json)?, mode, seed as u64).map_err(|e| JsValue::from_str(&e))?)
}

#[wasm_bindgen(js_name = noisyList)]
pub fn noisy_list(n_relevant: u32, n_partial: u32, n_irrelevant: u32, order: &str, seed: u32) -> Result<String, JsValue> {
    let order = match order {
        "original" => Order::Original,
        "reverse" => Order::Reverse,
        "shuffle" => Order::Shuffle,
        other => return Err(JsValue::from_str(&format!("unknown order `{other}`"))),
    };
    let spec = NoisyListSpec {
        n_relevant: n_relevant as usize,
        n_partial: n_partial as usize,
        n_irrelevant: n_irrelevant as usize,
        order,
        seed: seed as u64,
    };
    to_js(&noisy_demo(&spec).map_err(|e| JsValue::from_str(&e))?)
}
