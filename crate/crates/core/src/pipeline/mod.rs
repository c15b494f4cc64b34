//! Stage orchestration over one run directory.
//!
//! ```text
//! corpus/      corpus.jsonl qas.jsonl vocab.txt
//! retrieve/    rankings.jsonl
//! indicators/  indicators.jsonl
//! train/       model.ckpt train_log.csv epochs.json [training_lists.jsonl]
//! eval/        report_<setting>.json records_<setting>.csv lists_<setting>.jsonl summary.csv
//! sweep/       sweep.csv
//! ablate/      ablation.csv orders.csv
//! ```
//! Every stage also writes `manifest.json` with input and output hashes.

mod config;
mod manifest;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use config::{
    AblateSection, CorpusSection, EvalSection, IndicatorSection, ModelSection, NoisySection, RetrievalSection,
    RunConfig, TrainingSection,
};
pub use manifest::{hash_file, FileHash, Manifest};

use crate::corpus::{generate_corpus, read_qas, write_qas, Corpus, QaInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{run_eval, sweep_csv, topk_sweep, EvalContext, EvalReport, EvalSpec, Setting};
use crate::indicators::{mix64, read_bundles, write_bundles, Aggregation, IndicatorBundle, RankerProxy};
use crate::jsonl;
use crate::model::{train, Checkpoint, Example, ModelConfig, Modulation, Parameters, TrainOutcome};
use crate::prompting::PromptBuilder;
use crate::rag::Assembler;
use crate::retrieval::{read_rankings, write_rankings, Retriever, ScoredList};
use crate::robustness::{build_extreme_list, build_noisy_list, write_noisy_lists, NoisyList, NoisyListSpec, Order};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Corpus,
    Retrieve,
    Indicators,
    Train,
    Eval,
    Ablate,
    Sweep,
    All,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Corpus,
        Stage::Retrieve,
        Stage::Indicators,
        Stage::Train,
        Stage::Eval,
        Stage::Ablate,
        Stage::Sweep,
        Stage::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Retrieve => "retrieve",
            Stage::Indicators => "indicators",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Sweep => "sweep",
            Stage::All => "all",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown stage `{s}`")]))
    }
}

/// Process exit status for a pipeline error: 1 config, 2 missing artifact,
/// 3 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::MissingArtifact { .. } => 2,
        _ => 3,
    }
}

const CORPUS_FILE: &str = "corpus/corpus.jsonl";
const QA_FILE: &str = "corpus/qas.jsonl";
const VOCAB_FILE: &str = "corpus/vocab.txt";
const RANKINGS_FILE: &str = "retrieve/rankings.jsonl";
const INDICATORS_FILE: &str = "indicators/indicators.jsonl";
const CHECKPOINT_FILE: &str = "train/model.ckpt";

/// Loaded upstream artifacts shared by the later stages.
pub struct Workspace {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub qas: Vec<QaInstance>,
    pub retriever: Retriever,
    pub rankings: HashMap<String, ScoredList>,
    pub builder: PromptBuilder,
}

fn require(root: &Path, rel: &str, stage: &'static str) -> Result<PathBuf> {
    let p = root.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact {
            stage,
            path: PathBuf::from(rel),
        })
    }
}

impl Workspace {
    pub fn load(cfg: &RunConfig, with_rankings: bool) -> Result<Self> {
        let root = &cfg.out_dir;
        let vocab = Vocabulary::read(&require(root, VOCAB_FILE, "corpus")?)?;
        let corpus = Corpus::read(&require(root, CORPUS_FILE, "corpus")?, &vocab)?;
        let qas = read_qas(&require(root, QA_FILE, "corpus")?)?;
        let retriever = Retriever::new(&corpus, vocab.len(), cfg.retrieval.dim)?;
        let rankings = if with_rankings {
            read_rankings(&require(root, RANKINGS_FILE, "retrieve")?)?
                .into_iter()
                .map(|r| (r.qa_id.clone(), r))
                .collect()
        } else {
            HashMap::new()
        };
        let instruction = vocab.tokenize(&cfg.instruction, cfg.retrieval.unk_policy)?;
        let builder = PromptBuilder::new(instruction, cfg.model.max_context);
        Ok(Workspace {
            vocab,
            corpus,
            qas,
            retriever,
            rankings,
            builder,
        })
    }

    pub fn assembler(&self, cfg: &RunConfig, aggregation: Aggregation) -> Result<Assembler<'_>> {
        let mut scoring = cfg.indicators.scoring();
        scoring.aggregation = aggregation;
        Ok(Assembler {
            corpus: &self.corpus,
            vocab: &self.vocab,
            retriever: &self.retriever,
            ranker: RankerProxy::new(cfg.seed, cfg.indicators.ranker_noise)?,
            builder: &self.builder,
            scoring,
            unk: cfg.retrieval.unk_policy,
        })
    }

    pub fn eval_queries(&self, cfg: &RunConfig) -> &[QaInstance] {
        match cfg.eval.max_queries {
            0 => &self.qas,
            n => &self.qas[..n.min(self.qas.len())],
        }
    }
}

/// How training document lists are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainRegime {
    pub robust: bool,
    pub order: Order,
}

/// Training and held-out examples plus the lists they were built from.
pub struct TrainingSet {
    pub train: Vec<Example>,
    pub held_out: Vec<Example>,
    pub lists: Vec<NoisyList>,
}

pub fn training_set(cfg: &RunConfig, ws: &Workspace, asm: &Assembler, regime: TrainRegime) -> Result<TrainingSet> {
    let k = cfg.retrieval.k;
    let per_query = cfg.training.lists_per_query;
    let n_held = (ws.qas.len() as f64 * cfg.training.held_out_fraction).floor() as usize;
    let split = ws.qas.len() - n_held;
    let mut out = TrainingSet {
        train: Vec::with_capacity(split * per_query),
        held_out: Vec::with_capacity(n_held * per_query),
        lists: Vec::with_capacity(ws.qas.len() * per_query),
    };
    for (i, qa) in ws.qas.iter().enumerate() {
        let ranking = ws
            .rankings
            .get(&qa.qa_id)
            .ok_or_else(|| Error::MissingInput(format!("no retrieval result for `{}`", qa.qa_id)))?;
        for draw in 0..per_query as u64 {
            // Draw 0 keeps the run seed so a single list per query is
            // unaffected by this setting.
            let seed = if draw == 0 { cfg.seed } else { mix64(cfg.seed ^ mix64(draw)) };
            let spec = if regime.robust {
                cfg.noisy.spec(regime.order, seed)
            } else {
                NoisyListSpec::clean(k, regime.order, seed)
            };
            let list = build_noisy_list(ranking, &ws.corpus, &spec, asm.scorer(qa)?)?;
            let a = asm.assemble_list(qa, &list, Some(&qa.gold_answers[0]))?;
            let ex = Example {
                prompt: a.prompt,
                scores: a.scores,
            };
            if i < split {
                out.train.push(ex);
            } else {
                out.held_out.push(ex);
            }
            out.lists.push(list);
        }
    }
    Ok(out)
}

pub fn model_config(cfg: &RunConfig, vocab_size: usize, modulation: Modulation) -> ModelConfig {
    let m = &cfg.model;
    ModelConfig {
        vocab_size,
        d_model: m.d_model,
        n_heads: m.n_heads,
        n_layers: m.n_layers,
        d_ff: m.d_ff,
        max_context: m.max_context,
        seed: cfg.seed,
        modulation,
    }
}

pub fn train_model(cfg: &RunConfig, vocab_size: usize, modulation: Modulation, set: &TrainingSet) -> Result<TrainOutcome> {
    let params = Parameters::init(&model_config(cfg, vocab_size, modulation))?;
    train(params, &set.train, &set.held_out, &cfg.train_config())
}

fn rel(parts: &[&str]) -> String {
    parts.join("/")
}

fn write_text(root: &Path, rel: &str, text: &str) -> Result<()> {
    jsonl::write_bytes(&root.join(rel), text.as_bytes())
}

pub struct Pipeline {
    pub cfg: RunConfig,
    fingerprint: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let fingerprint = cfg.fingerprint();
        Ok(Pipeline { cfg, fingerprint })
    }

    fn root(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn manifest(&self, stage: &str, inputs: &[String], outputs: &[String]) -> Result<Manifest> {
        Manifest::record(self.root(), stage, &self.fingerprint, self.cfg.seed, inputs, outputs)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {} -> {}", stage.name(), self.root().display());
        match stage {
            Stage::Corpus => self.corpus(),
            Stage::Retrieve => self.retrieve(),
            Stage::Indicators => self.indicators(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::Sweep => self.sweep(),
            Stage::Ablate => self.ablate(),
            Stage::All => {
                for s in [
                    Stage::Corpus,
                    Stage::Retrieve,
                    Stage::Indicators,
                    Stage::Train,
                    Stage::Eval,
                    Stage::Sweep,
                    Stage::Ablate,
                ] {
                    self.run(s)?;
                }
                Ok(())
            }
        }
    }

    fn corpus(&self) -> Result<()> {
        let c = &self.cfg.corpus;
        let g = generate_corpus(c.seed, c.n_entities, c.n_relations, c.n_distractors)?;
        let root = self.root();
        g.corpus.write(&root.join(CORPUS_FILE))?;
        write_qas(&root.join(QA_FILE), &g.qas)?;
        g.vocab.write(&root.join(VOCAB_FILE))?;
        log::info!("{} documents, {} questions, vocabulary {}", g.corpus.len(), g.qas.len(), g.vocab.len());
        self.manifest("corpus", &[], &[CORPUS_FILE.into(), QA_FILE.into(), VOCAB_FILE.into()])?;
        Ok(())
    }

    fn corpus_inputs() -> Vec<String> {
        vec![CORPUS_FILE.into(), QA_FILE.into(), VOCAB_FILE.into()]
    }

    fn retrieve(&self) -> Result<()> {
        let ws = Workspace::load(&self.cfg, false)?;
        let depth = self.cfg.retrieval_depth();
        let lists = ws
            .qas
            .iter()
            .map(|qa| ws.retriever.retrieve_qa(qa, &ws.vocab, depth, self.cfg.retrieval.unk_policy))
            .collect::<Result<Vec<_>>>()?;
        write_rankings(&self.root().join(RANKINGS_FILE), &lists)?;
        self.manifest("retrieve", &Self::corpus_inputs(), &[RANKINGS_FILE.into()])?;
        Ok(())
    }

    fn indicators(&self) -> Result<()> {
        let ws = Workspace::load(&self.cfg, true)?;
        let asm = ws.assembler(&self.cfg, self.cfg.indicators.aggregation)?;
        let bundles = ws
            .qas
            .iter()
            .map(|qa| {
                let r = ws
                    .rankings
                    .get(&qa.qa_id)
                    .ok_or_else(|| Error::MissingInput(format!("no retrieval result for `{}`", qa.qa_id)))?;
                asm.bundle_for_ranking(qa, &r.truncated(self.cfg.retrieval.k))
            })
            .collect::<Result<Vec<IndicatorBundle>>>()?;
        write_bundles(&self.root().join(INDICATORS_FILE), &bundles)?;
        let mut inputs = Self::corpus_inputs();
        inputs.push(RANKINGS_FILE.into());
        self.manifest("indicators", &inputs, &[INDICATORS_FILE.into()])?;
        Ok(())
    }

    fn train(&self) -> Result<()> {
        require(self.root(), INDICATORS_FILE, "indicators")?;
        let ws = Workspace::load(&self.cfg, true)?;
        let asm = ws.assembler(&self.cfg, self.cfg.indicators.aggregation)?;
        let regime = TrainRegime {
            robust: self.cfg.training.robust,
            order: self.cfg.training.order,
        };
        let set = training_set(&self.cfg, &ws, &asm, regime)?;
        let outcome = train_model(&self.cfg, ws.vocab.len(), self.cfg.model.modulation, &set)?;
        let root = self.root();
        Checkpoint {
            params: outcome.params.clone(),
            steps: outcome.steps,
        }
        .save(&root.join(CHECKPOINT_FILE))?;
        outcome.write_log(&root.join("train/train_log.csv"))?;
        jsonl::write_json(&root.join("train/epochs.json"), &outcome.epochs)?;
        let mut outputs = vec![
            CHECKPOINT_FILE.to_string(),
            "train/train_log.csv".into(),
            "train/epochs.json".into(),
        ];
        if regime.robust {
            write_noisy_lists(&root.join("train/training_lists.jsonl"), &set.lists)?;
            outputs.push("train/training_lists.jsonl".into());
        }
        let mut inputs = Self::corpus_inputs();
        inputs.extend([RANKINGS_FILE.into(), INDICATORS_FILE.into()]);
        self.manifest("train", &inputs, &outputs)?;
        Ok(())
    }

    fn load_checkpoint(&self) -> Result<(Checkpoint, String)> {
        let path = require(self.root(), CHECKPOINT_FILE, "train")?;
        let ck = Checkpoint::load(&path)?;
        let id = hash_file(self.root(), CHECKPOINT_FILE)?.sha256;
        Ok((ck, id))
    }

    fn check_inputs(&self, ws: &Workspace) -> Result<()> {
        let path = require(self.root(), INDICATORS_FILE, "indicators")?;
        let bundles = read_bundles(&path)?;
        let have: std::collections::HashSet<&str> = bundles.iter().map(|b| b.qa_id.as_str()).collect();
        if let Some(qa) = ws.eval_queries(&self.cfg).iter().find(|q| !have.contains(q.qa_id.as_str())) {
            return Err(Error::MissingInput(format!("no indicators for query `{}`", qa.qa_id)));
        }
        Ok(())
    }

    fn eval_spec(&self, setting: Setting, checkpoint_id: &str) -> EvalSpec {
        EvalSpec {
            setting,
            k: self.cfg.retrieval.k,
            noisy: self.cfg.noisy.spec(self.cfg.noisy.order, 0),
            seeds: self.cfg.eval.seeds.clone(),
            checkpoint_id: checkpoint_id.to_string(),
        }
    }

    fn eval(&self) -> Result<()> {
        let (ck, ck_id) = self.load_checkpoint()?;
        let ws = Workspace::load(&self.cfg, true)?;
        self.check_inputs(&ws)?;
        if ck.params.config.vocab_size != ws.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint vocabulary {} does not match corpus vocabulary {}",
                ck.params.config.vocab_size,
                ws.vocab.len()
            )));
        }
        let asm = ws.assembler(&self.cfg, self.cfg.indicators.aggregation)?;
        let ctx = EvalContext {
            assembler: asm,
            params: &ck.params,
            queries: ws.eval_queries(&self.cfg),
            rankings: &ws.rankings,
            max_new_tokens: self.cfg.eval.max_new_tokens,
            workers: self.cfg.workers,
        };
        let root = self.root();
        let mut outputs = Vec::new();
        let mut summary = String::from("setting,f1,em,f1_std,em_std\n");
        for &setting in &self.cfg.eval.settings {
            let spec = self.eval_spec(setting, &ck_id);
            let report = run_eval(&ctx, &spec)?;
            log::info!(
                "{}: F1 {:.2} EM {:.2} (+/- {:.2})",
                setting.name(),
                report.f1,
                report.em,
                report.em_std
            );
            let report_path = rel(&["eval", &format!("report_{}.json", setting.name())]);
            let csv_path = rel(&["eval", &format!("records_{}.csv", setting.name())]);
            report.write(&root.join(&report_path))?;
            write_text(root, &csv_path, &report.records_csv())?;
            outputs.extend([report_path, csv_path]);
            if setting != Setting::Normal {
                let lists_path = rel(&["eval", &format!("lists_{}.jsonl", setting.name())]);
                write_noisy_lists(&root.join(&lists_path), &self.eval_lists(&ws, &ctx, &spec)?)?;
                outputs.push(lists_path);
            }
            let _ = writeln!(summary, "{},{},{},{},{}", setting.name(), report.f1, report.em, report.f1_std, report.em_std);
        }
        write_text(root, "eval/summary.csv", &summary)?;
        outputs.push("eval/summary.csv".into());
        let mut inputs = Self::corpus_inputs();
        inputs.extend([RANKINGS_FILE.into(), INDICATORS_FILE.into(), CHECKPOINT_FILE.into()]);
        self.manifest("eval", &inputs, &outputs)?;
        Ok(())
    }

    /// The document lists a corrupted setting presents, for inspection.
    fn eval_lists(&self, ws: &Workspace, ctx: &EvalContext, spec: &EvalSpec) -> Result<Vec<NoisyList>> {
        let mut out = Vec::new();
        for &seed in &spec.seeds {
            for qa in ctx.queries {
                let ranking = &ws.rankings[&qa.qa_id];
                let scorer = ctx.assembler.scorer(qa)?;
                out.push(match spec.setting {
                    Setting::Noisy => build_noisy_list(ranking, &ws.corpus, &NoisyListSpec { seed, ..spec.noisy }, scorer)?,
                    _ => build_extreme_list(ranking, &ws.corpus, spec.k, seed, scorer)?,
                });
            }
        }
        Ok(out)
    }

    fn sweep(&self) -> Result<()> {
        let (ck, ck_id) = self.load_checkpoint()?;
        let ws = Workspace::load(&self.cfg, true)?;
        self.check_inputs(&ws)?;
        let ctx = EvalContext {
            assembler: ws.assembler(&self.cfg, self.cfg.indicators.aggregation)?,
            params: &ck.params,
            queries: ws.eval_queries(&self.cfg),
            rankings: &ws.rankings,
            max_new_tokens: self.cfg.eval.max_new_tokens,
            workers: self.cfg.workers,
        };
        let rows = topk_sweep(&ctx, &self.cfg.eval.sweep_ks, &ck_id)?;
        write_text(self.root(), "sweep/sweep.csv", &sweep_csv(&rows))?;
        let mut inputs = Self::corpus_inputs();
        inputs.extend([RANKINGS_FILE.into(), INDICATORS_FILE.into(), CHECKPOINT_FILE.into()]);
        self.manifest("sweep", &inputs, &["sweep/sweep.csv".into()])?;
        Ok(())
    }

    /// Grid cells as `(cell id, modulation, robust, aggregation)`; the
    /// modulation-off control is always present.
    pub fn ablation_cells(&self) -> Vec<(String, Modulation, bool, Aggregation)> {
        let a = &self.cfg.ablate;
        let mut mods = a.modulations.clone();
        if !mods.contains(&Modulation::Off) {
            mods.push(Modulation::Off);
        }
        let mut cells = Vec::new();
        for &m in &mods {
            for &robust in &a.robust {
                for &agg in &a.aggregations {
                    let id = format!("mod={}|robust={robust}|agg={}", m.name(), agg.name());
                    cells.push((id, m, robust, agg));
                }
            }
        }
        cells
    }

    fn ablate(&self) -> Result<()> {
        require(self.root(), INDICATORS_FILE, "indicators")?;
        let ws = Workspace::load(&self.cfg, true)?;
        self.check_inputs(&ws)?;
        let root = self.root();
        let mut table = String::from("cell_id,setting,f1,em\n");
        for (id, modulation, robust, agg) in self.ablation_cells() {
            let order = if robust { self.cfg.training.order } else { Order::Original };
            let reports = self.train_and_eval(&ws, modulation, agg, TrainRegime { robust, order }, &self.cfg.ablate.settings)?;
            for r in reports {
                let _ = writeln!(table, "{id},{},{},{}", r.setting.name(), r.f1, r.em);
            }
        }
        write_text(root, "ablate/ablation.csv", &table)?;
        let mut outputs = vec!["ablate/ablation.csv".to_string()];
        if self.cfg.ablate.order_study {
            let mut orders = String::from("row,setting,f1,em,f1_std,em_std\n");
            let rows = [
                ("original", TrainRegime { robust: false, order: Order::Original }),
                ("reverse", TrainRegime { robust: false, order: Order::Reverse }),
                ("shuffle", TrainRegime { robust: false, order: Order::Shuffle }),
                ("noise", TrainRegime { robust: true, order: Order::Shuffle }),
            ];
            let modulation = self.cfg.model.modulation;
            for (name, regime) in rows {
                let reports =
                    self.train_and_eval(&ws, modulation, self.cfg.indicators.aggregation, regime, &[Setting::Noisy])?;
                let r = &reports[0];
                let _ = writeln!(orders, "{name},{},{},{},{},{}", r.setting.name(), r.f1, r.em, r.f1_std, r.em_std);
            }
            write_text(root, "ablate/orders.csv", &orders)?;
            outputs.push("ablate/orders.csv".into());
        }
        let mut inputs = Self::corpus_inputs();
        inputs.extend([RANKINGS_FILE.into(), INDICATORS_FILE.into()]);
        self.manifest("ablate", &inputs, &outputs)?;
        Ok(())
    }

    fn train_and_eval(
        &self,
        ws: &Workspace,
        modulation: Modulation,
        aggregation: Aggregation,
        regime: TrainRegime,
        settings: &[Setting],
    ) -> Result<Vec<EvalReport>> {
        let asm = ws.assembler(&self.cfg, aggregation)?;
        let set = training_set(&self.cfg, ws, &asm, regime)?;
        let outcome = train_model(&self.cfg, ws.vocab.len(), modulation, &set)?;
        let ck_id = outcome.params.checksum();
        let ctx = EvalContext {
            assembler: asm,
            params: &outcome.params,
            queries: ws.eval_queries(&self.cfg),
            rankings: &ws.rankings,
            max_new_tokens: self.cfg.eval.max_new_tokens,
            workers: self.cfg.workers,
        };
        settings.iter().map(|&s| run_eval(&ctx, &self.eval_spec(s, &ck_id))).collect()
    }
}
