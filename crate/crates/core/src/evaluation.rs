//! Answer metrics (SQuAD-style EM and token F1) and the Normal / Noisy /
//! Extreme evaluation harness.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QaInstance;
use crate::error::{Error, Result};
use crate::indicators::{Aggregation, Scheme};
use crate::jsonl;
use crate::model::{generate, Parameters};
use crate::rag::Assembler;
use crate::retrieval::ScoredList;
use crate::robustness::{build_extreme_list, build_noisy_list, NoisyListSpec, Order};

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Multiset-overlap F1 between two token sequences; 1 when both are empty.
pub fn overlap_f1<T: Eq + Hash>(prediction: &[T], gold: &[T]) -> f64 {
    if prediction.is_empty() || gold.is_empty() {
        return if prediction.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&T, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in prediction {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / prediction.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == p) as u8
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    overlap_f1(&pt, &gt)
}

pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_single(prediction, g)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Normal,
    Noisy,
    Extreme,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Normal => "normal",
            Setting::Noisy => "noisy",
            Setting::Extreme => "extreme",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qa_id: String,
    /// Sampling seed of the document list; absent in the Normal setting.
    pub seed: Option<u64>,
    pub prediction: String,
    pub best_gold: String,
    pub f1: f64,
    pub em: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: Option<u64>,
    pub f1: f64,
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seeds: Vec<u64>,
    pub k: usize,
    pub scheme: Scheme,
    pub aggregation: Aggregation,
    pub weight: f64,
    pub noisy: (usize, usize, usize),
    pub order: Order,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub fingerprint: Fingerprint,
    /// Mean F1 x 100 over all records.
    pub f1: f64,
    /// Mean EM x 100 over all records.
    pub em: f64,
    /// Population standard deviation of the per-seed means.
    pub f1_std: f64,
    pub em_std: f64,
    pub per_seed: Vec<SeedSummary>,
    pub records: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    /// One row per query record.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("seed,qa_id,prediction,best_gold,f1,em\n");
        for r in &self.records {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{seed},{},{},{},{},{}",
                csv_field(&r.qa_id),
                csv_field(&r.prediction),
                csv_field(&r.best_gold),
                r.f1,
                r.em
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub setting: Setting,
    pub k: usize,
    /// Composition and order for the Noisy setting; its seed is replaced by
    /// each entry of `seeds`.
    pub noisy: NoisyListSpec,
    pub seeds: Vec<u64>,
    pub checkpoint_id: String,
}

/// Everything evaluation reads; all of it is shared read-only across workers.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub assembler: Assembler<'a>,
    pub params: &'a Parameters,
    pub queries: &'a [QaInstance],
    pub rankings: &'a HashMap<String, ScoredList>,
    pub max_new_tokens: usize,
    pub workers: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn answer_one(ctx: &EvalContext, spec: &EvalSpec, qa: &QaInstance, seed: Option<u64>) -> Result<QueryRecord> {
    let ranking = &ctx.rankings[&qa.qa_id];
    let asm = &ctx.assembler;
    let assembled = match spec.setting {
        Setting::Normal => asm.assemble_ranking(qa, &ranking.truncated(spec.k), None)?,
        Setting::Noisy => {
            let list_spec = NoisyListSpec {
                seed: seed.unwrap_or(0),
                ..spec.noisy
            };
            let list = build_noisy_list(ranking, asm.corpus, &list_spec, asm.scorer(qa)?)?;
            asm.assemble_list(qa, &list, None)?
        }
        Setting::Extreme => {
            let list = build_extreme_list(ranking, asm.corpus, spec.k, seed.unwrap_or(0), asm.scorer(qa)?)?;
            asm.assemble_list(qa, &list, None)?
        }
    };
    let out = generate(ctx.params, &assembled.prompt, &assembled.scores, ctx.max_new_tokens)?;
    let prediction = asm.vocab.detokenize(&out.tokens);
    let (best_gold, f1) = qa
        .gold_answers
        .iter()
        .map(|g| (g.clone(), f1_single(&prediction, g)))
        .fold((String::new(), -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    let em = exact_match(&prediction, &qa.gold_answers);
    let best_gold = if em == 1 {
        let p = normalize_answer(&prediction);
        qa.gold_answers.iter().find(|g| normalize_answer(g) == p).cloned().unwrap_or(best_gold)
    } else {
        best_gold
    };
    Ok(QueryRecord {
        qa_id: qa.qa_id.clone(),
        seed,
        prediction,
        best_gold,
        f1: f1.max(0.0),
        em,
    })
}

/// Evaluates every query under one setting. Inputs are checked before any
/// generation; per-query work may run on several threads but the report
/// keeps input order.
pub fn run_eval(ctx: &EvalContext, spec: &EvalSpec) -> Result<EvalReport> {
    if let Some(qa) = ctx.queries.iter().find(|q| !ctx.rankings.contains_key(&q.qa_id)) {
        return Err(Error::MissingInput(format!("no retrieval result for query `{}`", qa.qa_id)));
    }
    if let Some(qa) = ctx.queries.iter().find(|q| q.gold_answers.is_empty()) {
        return Err(Error::MissingInput(format!("query `{}` has no gold answers", qa.qa_id)));
    }
    if spec.k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    if spec.setting == Setting::Noisy && spec.noisy.total() != spec.k {
        return Err(Error::param(
            "noisy",
            format!("composition sums to {} but k = {}", spec.noisy.total(), spec.k),
        ));
    }
    if spec.setting != Setting::Normal && spec.seeds.is_empty() {
        return Err(Error::param("seeds", "corrupted settings need at least one seed"));
    }
    let seeds: Vec<Option<u64>> = match spec.setting {
        Setting::Normal => vec![None],
        _ => spec.seeds.iter().map(|&s| Some(s)).collect(),
    };
    let jobs: Vec<(Option<u64>, &QaInstance)> = seeds
        .iter()
        .flat_map(|&s| ctx.queries.iter().map(move |q| (s, q)))
        .collect();
    let records = run_jobs(ctx, spec, &jobs)?;

    let mut per_seed = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let chunk = &records[i * ctx.queries.len()..(i + 1) * ctx.queries.len()];
        let n = chunk.len().max(1) as f64;
        per_seed.push(SeedSummary {
            seed,
            f1: 100.0 * chunk.iter().map(|r| r.f1).sum::<f64>() / n,
            em: 100.0 * chunk.iter().map(|r| r.em as f64).sum::<f64>() / n,
        });
    }
    let n = records.len().max(1) as f64;
    let (_, f1_std) = mean_std(&per_seed.iter().map(|s| s.f1).collect::<Vec<_>>());
    let (_, em_std) = mean_std(&per_seed.iter().map(|s| s.em).collect::<Vec<_>>());
    let scoring = ctx.assembler.scoring;
    Ok(EvalReport {
        setting: spec.setting,
        fingerprint: Fingerprint {
            seeds: if spec.setting == Setting::Normal { vec![] } else { spec.seeds.clone() },
            k: spec.k,
            scheme: scoring.scheme,
            aggregation: scoring.aggregation,
            weight: scoring.weight,
            noisy: (spec.noisy.n_relevant, spec.noisy.n_partial, spec.noisy.n_irrelevant),
            order: spec.noisy.order,
            checkpoint_id: spec.checkpoint_id.clone(),
        },
        f1: 100.0 * records.iter().map(|r| r.f1).sum::<f64>() / n,
        em: 100.0 * records.iter().map(|r| r.em as f64).sum::<f64>() / n,
        f1_std,
        em_std,
        per_seed,
        records,
    })
}

fn run_jobs(ctx: &EvalContext, spec: &EvalSpec, jobs: &[(Option<u64>, &QaInstance)]) -> Result<Vec<QueryRecord>> {
    let workers = ctx.workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(|&(s, q)| answer_one(ctx, spec, q, s)).collect();
    }
    let chunk = jobs.len().div_ceil(workers);
    let results: Vec<Result<Vec<QueryRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&(s, q)| answer_one(ctx, spec, q, s)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub f1: f64,
    pub em: f64,
}

/// One Normal-setting evaluation per `k`.
pub fn topk_sweep(ctx: &EvalContext, ks: &[usize], checkpoint_id: &str) -> Result<Vec<SweepRow>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k > ctx.assembler.corpus.len() {
        return Err(Error::param(
            "ks",
            format!("k={max_k} exceeds corpus size {}", ctx.assembler.corpus.len()),
        ));
    }
    ks.iter()
        .map(|&k| {
            let spec = EvalSpec {
                setting: Setting::Normal,
                k,
                noisy: NoisyListSpec::clean(k, Order::Original, 0),
                seeds: vec![],
                checkpoint_id: checkpoint_id.to_string(),
            };
            let r = run_eval(ctx, &spec)?;
            Ok(SweepRow { k, f1: r.f1, em: r.em })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,f1,em\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.k, r.f1, r.em);
    }
    out
}
