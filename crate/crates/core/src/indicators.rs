//! Per-document quality indicators: retriever cosine, ranker-proxy logit and
//! QPP-proxy logit, plus the three normalization schemes and the weighted
//! aggregation that turns them into one score per document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::evaluation::overlap_f1;
use crate::jsonl;
use crate::retrieval::ScoredList;

/// Ranker-proxy logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub const LOGIT_CLAMP: f64 = 6.0;
pub const DEFAULT_SUPPLEMENT_WEIGHT: f64 = 0.5;
/// Decay rate of the exponential-rank scheme.
pub const EXP_RANK_DECAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Max,
    MinMax,
    ExpRank,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Max => "max",
            Scheme::MinMax => "minmax",
            Scheme::ExpRank => "exprank",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScores {
    pub values: Vec<f64>,
    pub scheme: Scheme,
}

/// Normalizes one score per document, listed in rank order.
///
/// `Max` divides by the maximum and needs it to be positive. `MinMax` maps
/// onto `[0, 1]`; an all-equal list maps to all ones. `ExpRank` ignores the
/// values entirely and returns `e^{-0.5 (i-1)}` weights that sum to one.
pub fn normalize(scores: &[f64], scheme: Scheme) -> Result<NormalizedScores> {
    if scores.is_empty() {
        return Err(Error::Normalization("empty score list".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Normalization(format!("non-finite score {bad}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = match scheme {
        Scheme::Max => {
            if max <= 0.0 {
                return Err(Error::Normalization(format!(
                    "max normalization needs a positive maximum, got {max}"
                )));
            }
            scores
                .iter()
                .map(|&s| if s == max { 1.0 } else { s / max })
                .collect()
        }
        Scheme::MinMax => {
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            if max == min {
                vec![1.0; scores.len()]
            } else {
                scores
                    .iter()
                    .map(|&s| if s == max { 1.0 } else { (s - min) / (max - min) })
                    .collect()
            }
        }
        Scheme::ExpRank => {
            let weights: Vec<f64> = (0..scores.len())
                .map(|i| (-EXP_RANK_DECAY * i as f64).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            weights.iter().map(|w| w / total).collect()
        }
    };
    Ok(NormalizedScores { values, scheme })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocIndicators {
    pub doc_id: String,
    pub ret: f64,
    pub rank_score: f64,
    pub qpp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorBundle {
    pub qa_id: String,
    pub docs: Vec<DocIndicators>,
}

impl IndicatorBundle {
    pub fn from_families(qa_id: &str, doc_ids: &[String], ret: &[f64], rank: &[f64], qpp: &[f64]) -> Self {
        IndicatorBundle {
            qa_id: qa_id.to_string(),
            docs: doc_ids
                .iter()
                .enumerate()
                .map(|(i, id)| DocIndicators {
                    doc_id: id.clone(),
                    ret: ret[i],
                    rank_score: rank[i],
                    qpp: qpp[i],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn ret(&self) -> Vec<f64> {
        self.docs.iter().map(|d| d.ret).collect()
    }

    pub fn rank(&self) -> Vec<f64> {
        self.docs.iter().map(|d| d.rank_score).collect()
    }

    pub fn qpp(&self) -> Vec<f64> {
        self.docs.iter().map(|d| d.qpp).collect()
    }
}

pub fn write_bundles(path: &Path, bundles: &[IndicatorBundle]) -> Result<()> {
    jsonl::write_lines(path, bundles)
}

pub fn read_bundles(path: &Path) -> Result<Vec<IndicatorBundle>> {
    jsonl::read_lines(path)
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// splitmix64 finalizer, used to derive reproducible noise from ids.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn hash_str(seed: u64, s: &str) -> u64 {
    s.bytes().fold(mix64(seed), |h, b| mix64(h ^ b as u64))
}

/// Stand-in for an LLM relevance ranker: log-odds of the token-level F1
/// between question and document, plus bounded noise keyed on
/// `(seed, qa_id, doc_id)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankerProxy {
    pub seed: u64,
    /// Half-width of the uniform noise; zero disables it. Must be <= 0.1.
    pub noise: f64,
}

impl RankerProxy {
    pub const MAX_NOISE: f64 = 0.1;

    pub fn new(seed: u64, noise: f64) -> Result<Self> {
        if !(0.0..=Self::MAX_NOISE).contains(&noise) {
            return Err(Error::param("ranker_noise", format!("must lie in [0, 0.1], got {noise}")));
        }
        Ok(RankerProxy { seed, noise })
    }

    pub fn score(&self, qa_id: &str, question: &[TokenId], doc_id: &str, doc: &[TokenId]) -> f64 {
        let f1 = overlap_f1(question, doc);
        let base = logit(f1).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let jitter = if self.noise > 0.0 {
            let h = hash_str(hash_str(self.seed, qa_id), doc_id);
            let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
            (2.0 * unit - 1.0) * self.noise
        } else {
            0.0
        };
        (base + jitter).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    }
}

const QPP_EPS: f64 = 1e-3;

/// Stand-in for a QPP model. The shared part is the logit of the standard
/// deviation of the list's retrieval scores (a wider spread signals an
/// easier query); each document then adds its deviation from the list mean.
pub fn score_qpp_proxy(retrieval_scores: &[f64]) -> Result<Vec<f64>> {
    if retrieval_scores.is_empty() {
        return Err(Error::param("ranking", "QPP proxy needs a non-empty ranking"));
    }
    let n = retrieval_scores.len() as f64;
    let mean = retrieval_scores.iter().sum::<f64>() / n;
    let var = retrieval_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let shared = logit(var.sqrt().clamp(QPP_EPS, 1.0 - QPP_EPS));
    Ok(retrieval_scores.iter().map(|s| shared + (s - mean)).collect())
}

pub fn score_qpp_for_list(ranking: &ScoredList) -> Result<Vec<f64>> {
    score_qpp_proxy(&ranking.scores())
}

/// Which families enter the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    RetOnly,
    RetRank,
    RetQpp,
    All,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::RetOnly => "ret-only",
            Aggregation::RetRank => "ret+rank",
            Aggregation::RetQpp => "ret+qpp",
            Aggregation::All => "all",
        }
    }

    fn uses_rank(self) -> bool {
        matches!(self, Aggregation::RetRank | Aggregation::All)
    }

    fn uses_qpp(self) -> bool {
        matches!(self, Aggregation::RetQpp | Aggregation::All)
    }
}

/// How the combined score is divided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Normalize each family, combine, then normalize the combination.
    #[default]
    Normalized,
    /// Normalized numerator over the maximum of the raw weighted sum.
    Raw,
}

fn max_normalized(family: &[f64], name: &str) -> Result<Vec<f64>> {
    normalize(family, Scheme::Max)
        .map(|n| n.values)
        .map_err(|e| Error::Normalization(format!("{name} family: {e}")))
}

/// Weighted combination `ret + w * (rank + qpp)` over the selected
/// families, each Max-normalized first; the result is not yet normalized.
pub fn combine(bundle: &IndicatorBundle, aggregation: Aggregation, weight: f64) -> Result<Vec<f64>> {
    if bundle.is_empty() {
        return Err(Error::param("bundle", "empty indicator bundle"));
    }
    let mut combined = max_normalized(&bundle.ret(), "ret")?;
    if aggregation.uses_rank() {
        for (c, r) in combined.iter_mut().zip(max_normalized(&bundle.rank(), "rank")?) {
            *c += weight * r;
        }
    }
    if aggregation.uses_qpp() {
        for (c, q) in combined.iter_mut().zip(max_normalized(&bundle.qpp(), "qpp")?) {
            *c += weight * q;
        }
    }
    Ok(combined)
}

/// Default aggregation over all three families with weight 0.5, Max
/// normalized; the maximum of the output is exactly 1.
pub fn aggregate(bundle: &IndicatorBundle) -> Result<Vec<f64>> {
    aggregate_with(bundle, Aggregation::All, DEFAULT_SUPPLEMENT_WEIGHT, Denominator::Normalized)
}

pub fn aggregate_with(
    bundle: &IndicatorBundle,
    aggregation: Aggregation,
    weight: f64,
    denominator: Denominator,
) -> Result<Vec<f64>> {
    let combined = combine(bundle, aggregation, weight)?;
    match denominator {
        Denominator::Normalized => Ok(normalize(&combined, Scheme::Max)?.values),
        Denominator::Raw => {
            let raw_max = bundle
                .docs
                .iter()
                .map(|d| {
                    let mut s = d.ret;
                    if aggregation.uses_rank() {
                        s += weight * d.rank_score;
                    }
                    if aggregation.uses_qpp() {
                        s += weight * d.qpp;
                    }
                    s
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if raw_max <= 0.0 {
                return Err(Error::Normalization(format!(
                    "raw denominator must be positive, got {raw_max}"
                )));
            }
            Ok(combined.iter().map(|c| c / raw_max).collect())
        }
    }
}

/// Everything needed to turn an indicator bundle into per-document segment
/// scores for the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub scheme: Scheme,
    pub aggregation: Aggregation,
    pub weight: f64,
    pub denominator: Denominator,
    /// Lower bound applied to every document score so the modulation
    /// matrix stays strictly positive.
    pub floor: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            scheme: Scheme::Max,
            aggregation: Aggregation::RetOnly,
            weight: DEFAULT_SUPPLEMENT_WEIGHT,
            denominator: Denominator::Normalized,
            floor: 1e-3,
        }
    }
}

const RET_FLOOR: f64 = 1e-6;

/// Map raw families onto positive ranges: cosine scores are clipped at a
/// tiny positive value and the two logit families pass through the
/// logistic function.
pub fn positive_families(bundle: &IndicatorBundle) -> IndicatorBundle {
    IndicatorBundle {
        qa_id: bundle.qa_id.clone(),
        docs: bundle
            .docs
            .iter()
            .map(|d| DocIndicators {
                doc_id: d.doc_id.clone(),
                ret: d.ret.max(RET_FLOOR),
                rank_score: sigmoid(d.rank_score),
                qpp: sigmoid(d.qpp),
            })
            .collect(),
    }
}

/// Segment scores in (0, 1] for the documents of one bundle, in bundle order.
pub fn document_scores(bundle: &IndicatorBundle, cfg: &ScoringConfig) -> Result<NormalizedScores> {
    let pos = positive_families(bundle);
    let mut scores = match (cfg.aggregation, cfg.scheme, cfg.denominator) {
        (Aggregation::RetOnly, scheme, _) => normalize(&pos.ret(), scheme)?,
        (agg, Scheme::Max, denom) => NormalizedScores {
            values: aggregate_with(&pos, agg, cfg.weight, denom)?,
            scheme: Scheme::Max,
        },
        (agg, scheme, _) => normalize(&combine(&pos, agg, cfg.weight)?, scheme)?,
    };
    for v in &mut scores.values {
        *v = v.clamp(cfg.floor, 1.0);
    }
    Ok(scores)
}
