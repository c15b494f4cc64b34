//! Run configuration: one TOML file, every field defaulted, unknown keys
//! and bad values reported together.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::UnkPolicy;
use crate::error::{Error, Result};
use crate::indicators::{Aggregation, Denominator, RankerProxy, Scheme, ScoringConfig};
use crate::model::{Modulation, TrainConfig};
use crate::robustness::{NoisyListSpec, Order};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_distractors: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            seed: 7,
            n_entities: 200,
            n_relations: 3,
            n_distractors: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub dim: usize,
    pub k: usize,
    pub unk_policy: UnkPolicy,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            dim: crate::retrieval::DEFAULT_DIM,
            k: 10,
            unk_policy: UnkPolicy::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorSection {
    pub scheme: Scheme,
    pub aggregation: Aggregation,
    pub weight: f64,
    pub denominator: Denominator,
    /// Lower clamp on document scores.
    pub floor: f64,
    pub ranker_noise: f64,
}

impl Default for IndicatorSection {
    fn default() -> Self {
        let s = ScoringConfig::default();
        IndicatorSection {
            scheme: s.scheme,
            aggregation: s.aggregation,
            weight: s.weight,
            denominator: s.denominator,
            floor: s.floor,
            ranker_noise: 0.05,
        }
    }
}

impl IndicatorSection {
    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            scheme: self.scheme,
            aggregation: self.aggregation,
            weight: self.weight,
            denominator: self.denominator,
            floor: self.floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub modulation: Modulation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            max_context: 512,
            modulation: Modulation::Multiplicative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub freeze_non_attention: bool,
    /// Train on noisy lists instead of the clean top-k.
    pub robust: bool,
    /// Document order of the training lists.
    pub order: Order,
    /// Trailing fraction of the questions kept out of training and used for
    /// the per-epoch held-out loss.
    pub held_out_fraction: f64,
    /// Independently sampled document lists per question. Values above 1
    /// stop the model from keying answers on one fixed list.
    pub lists_per_query: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: 3e-3,
            epochs: 12,
            batch_size: 8,
            warmup_steps: 20,
            clip_norm: 1.0,
            freeze_non_attention: false,
            robust: true,
            order: Order::Shuffle,
            held_out_fraction: 0.0,
            lists_per_query: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoisySection {
    pub n_relevant: usize,
    pub n_partial: usize,
    pub n_irrelevant: usize,
    pub order: Order,
}

impl Default for NoisySection {
    fn default() -> Self {
        let d = NoisyListSpec::default();
        NoisySection {
            n_relevant: d.n_relevant,
            n_partial: d.n_partial,
            n_irrelevant: d.n_irrelevant,
            order: d.order,
        }
    }
}

impl NoisySection {
    pub fn spec(&self, order: Order, seed: u64) -> NoisyListSpec {
        NoisyListSpec {
            n_relevant: self.n_relevant,
            n_partial: self.n_partial,
            n_irrelevant: self.n_irrelevant,
            order,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub settings: Vec<crate::evaluation::Setting>,
    /// Sampling seeds for the Noisy and Extreme lists.
    pub seeds: Vec<u64>,
    pub max_new_tokens: usize,
    /// Evaluate only the first N questions; 0 means all.
    pub max_queries: usize,
    pub sweep_ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        use crate::evaluation::Setting;
        EvalSection {
            settings: vec![Setting::Normal, Setting::Noisy, Setting::Extreme],
            seeds: vec![0, 1, 2, 3, 4],
            max_new_tokens: 6,
            max_queries: 0,
            sweep_ks: vec![1, 3, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Modulation modes in the grid; `off` is always added as the control.
    pub modulations: Vec<Modulation>,
    pub robust: Vec<bool>,
    pub aggregations: Vec<Aggregation>,
    /// Settings each grid cell is evaluated in.
    pub settings: Vec<crate::evaluation::Setting>,
    /// Also run the four document-order rows.
    pub order_study: bool,
}

impl Default for AblateSection {
    fn default() -> Self {
        use crate::evaluation::Setting;
        AblateSection {
            modulations: vec![Modulation::Multiplicative],
            robust: vec![false, true],
            aggregations: vec![Aggregation::RetOnly, Aggregation::All],
            settings: vec![Setting::Normal, Setting::Noisy, Setting::Extreme],
            order_study: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization, training order and training-list sampling.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Query-level worker threads for eval/ablate. Reports do not depend
    /// on the count.
    pub workers: usize,
    pub instruction: String,
    pub corpus: CorpusSection,
    pub retrieval: RetrievalSection,
    pub indicators: IndicatorSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub noisy: NoisySection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            instruction: crate::prompting::DEFAULT_INSTRUCTION.to_string(),
            corpus: CorpusSection::default(),
            retrieval: RetrievalSection::default(),
            indicators: IndicatorSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            noisy: NoisySection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn unknown_keys(prefix: &str, given: &toml::Table, known: &toml::Table, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            None => out.push(format!("unknown key `{path}`")),
            Some(toml::Value::Table(k)) => {
                if let toml::Value::Table(g) = value {
                    unknown_keys(&path, g, k, out);
                }
            }
            Some(_) => {}
        }
    }
}

fn section<T: DeserializeOwned + Default>(table: &toml::Table, name: &str, errors: &mut Vec<String>) -> T {
    match table.get(name) {
        None => T::default(),
        Some(v) => match v.clone().try_into::<T>() {
            Ok(t) => t,
            Err(e) => {
                errors.push(format!("[{name}]: {}", e.message().trim()));
                T::default()
            }
        },
    }
}

fn scalar<T: DeserializeOwned>(table: &toml::Table, name: &str, default: T, errors: &mut Vec<String>) -> T {
    match table.get(name) {
        None => default,
        Some(v) => match v.clone().try_into::<T>() {
            Ok(t) => t,
            Err(e) => {
                errors.push(format!("`{name}`: {}", e.message().trim()));
                default
            }
        },
    }
}

impl RunConfig {
    /// Parses TOML text, collecting unknown keys, type errors and range
    /// violations into a single [`Error::Config`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("syntax: {}", e.message().trim())]))?;
        let known = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut errors = Vec::new();
        unknown_keys("", &table, &known, &mut errors);
        let d = RunConfig::default();
        let cfg = RunConfig {
            seed: scalar(&table, "seed", d.seed, &mut errors),
            out_dir: scalar(&table, "out_dir", d.out_dir, &mut errors),
            workers: scalar(&table, "workers", d.workers, &mut errors),
            instruction: scalar(&table, "instruction", d.instruction, &mut errors),
            corpus: section(&table, "corpus", &mut errors),
            retrieval: section(&table, "retrieval", &mut errors),
            indicators: section(&table, "indicators", &mut errors),
            model: section(&table, "model", &mut errors),
            training: section(&table, "training", &mut errors),
            noisy: section(&table, "noisy", &mut errors),
            eval: section(&table, "eval", &mut errors),
            ablate: section(&table, "ablate", &mut errors),
        };
        errors.retain(|e| !e.contains("unknown field"));
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every semantic constraint that does not hold.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        let c = &self.corpus;
        check(c.n_entities >= 2, format!("corpus.n_entities must be >= 2, got {}", c.n_entities));
        check(
            (1..=crate::corpus::MAX_RELATIONS).contains(&c.n_relations),
            format!("corpus.n_relations must be in 1..={}, got {}", crate::corpus::MAX_RELATIONS, c.n_relations),
        );
        let n_docs = c.n_entities * c.n_relations + c.n_distractors;
        let r = &self.retrieval;
        check(r.dim >= 1, "retrieval.dim must be >= 1".into());
        check(r.k >= 1, "retrieval.k must be >= 1".into());
        check(
            2 * r.k <= n_docs,
            format!("retrieval.k = {} needs a corpus of at least 2k = {} documents, have {n_docs}", r.k, 2 * r.k),
        );
        let i = &self.indicators;
        check(i.weight.is_finite() && i.weight >= 0.0, format!("indicators.weight must be >= 0, got {}", i.weight));
        check(
            i.floor > 0.0 && i.floor <= 1.0,
            format!("indicators.floor must lie in (0, 1], got {}", i.floor),
        );
        check(
            (0.0..=RankerProxy::MAX_NOISE).contains(&i.ranker_noise),
            format!("indicators.ranker_noise must lie in [0, 0.1], got {}", i.ranker_noise),
        );
        let m = &self.model;
        for (name, val) in [
            ("d_model", m.d_model),
            ("n_heads", m.n_heads),
            ("n_layers", m.n_layers),
            ("d_ff", m.d_ff),
            ("max_context", m.max_context),
        ] {
            check(val >= 1, format!("model.{name} must be >= 1"));
        }
        check(
            m.n_heads == 0 || m.d_model % m.n_heads == 0,
            format!("model.d_model {} not divisible by model.n_heads {}", m.d_model, m.n_heads),
        );
        let t = &self.training;
        let tc = self.train_config().validate();
        check(tc.is_ok(), format!("training: {}", tc.err().map(|e| e.to_string()).unwrap_or_default()));
        check(t.epochs >= 1, "training.epochs must be >= 1".into());
        check(t.lists_per_query >= 1, "training.lists_per_query must be >= 1".into());
        check(
            (0.0..1.0).contains(&t.held_out_fraction),
            format!("training.held_out_fraction must lie in [0, 1), got {}", t.held_out_fraction),
        );
        let n = &self.noisy;
        check(
            n.n_relevant + n.n_partial + n.n_irrelevant == r.k,
            format!(
                "noisy composition {}+{}+{} must sum to retrieval.k = {}",
                n.n_relevant, n.n_partial, n.n_irrelevant, r.k
            ),
        );
        let e = &self.eval;
        check(!e.seeds.is_empty(), "eval.seeds must not be empty".into());
        check(e.max_new_tokens >= 1, "eval.max_new_tokens must be >= 1".into());
        check(
            e.sweep_ks.iter().all(|&k| k >= 1 && k <= n_docs),
            format!("eval.sweep_ks must lie in 1..={n_docs}"),
        );
        check(self.workers >= 1, "workers must be >= 1".into());
        let a = &self.ablate;
        check(!a.robust.is_empty(), "ablate.robust must not be empty".into());
        check(!a.aggregations.is_empty(), "ablate.aggregations must not be empty".into());
        check(!a.settings.is_empty(), "ablate.settings must not be empty".into());
        v
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            clip_norm: t.clip_norm,
            seed: self.seed,
            freeze_non_attention: t.freeze_non_attention,
            ..TrainConfig::default()
        }
    }

    /// The largest list any stage asks the retriever for.
    pub fn retrieval_depth(&self) -> usize {
        self.eval.sweep_ks.iter().copied().chain([self.retrieval.k]).max().unwrap_or(self.retrieval.k)
    }

    /// SHA-256 of the configuration with run-location fields removed, so
    /// the same experiment in two directories fingerprints identically.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.workers = 1;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        crate::model::hex_digest(&Sha256::digest(bytes))
    }
}
