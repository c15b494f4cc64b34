use std::path::Path;

use opendec_core::evaluation::Setting;
use opendec_core::indicators::Aggregation;
use opendec_core::model::Modulation;
use opendec_core::pipeline::{exit_code, Manifest, Pipeline, RunConfig, Stage};
use opendec_core::Error;

/// A configuration small enough to run every stage in a few seconds.
fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out.to_path_buf();
    cfg.instruction = "answer the question".into();
    cfg.corpus.n_entities = 6;
    cfg.corpus.n_relations = 2;
    cfg.corpus.n_distractors = 30;
    cfg.model.d_model = 8;
    cfg.model.n_heads = 2;
    cfg.model.n_layers = 1;
    cfg.model.d_ff = 8;
    cfg.model.max_context = 128;
    cfg.training.epochs = 1;
    cfg.training.batch_size = 4;
    cfg.eval.seeds = vec![0, 1];
    cfg.eval.max_queries = 4;
    cfg.eval.sweep_ks = vec![1, 5];
    cfg.ablate.robust = vec![false];
    cfg.ablate.aggregations = vec![Aggregation::RetOnly];
    cfg.ablate.settings = vec![Setting::Normal];
    cfg.ablate.order_study = false;
    cfg
}

fn read(root: &Path, rel: &str) -> String {
    std::fs::read_to_string(root.join(rel)).unwrap()
}

#[test]
fn corpus_stage_writes_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(dir.path())).unwrap().run(Stage::Corpus).unwrap();
    for f in ["corpus/corpus.jsonl", "corpus/qas.jsonl", "corpus/vocab.txt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let m = Manifest::read(dir.path(), "corpus").unwrap();
    assert_eq!(m.stage, "corpus");
    assert_eq!(m.outputs.len(), 3);
    let vocab = read(dir.path(), "corpus/vocab.txt");
    assert_eq!(vocab.lines().take(4).collect::<Vec<_>>(), ["<pad>", "<bos>", "<eos>", "<sep>"]);
    let first: serde_json::Value = serde_json::from_str(read(dir.path(), "corpus/qas.jsonl").lines().next().unwrap()).unwrap();
    for key in ["qa_id", "question", "answers", "gold_doc_ids"] {
        assert!(first.get(key).is_some(), "qa file lacks {key}");
    }
}

#[test]
fn eval_without_checkpoint_names_train() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path())).unwrap();
    for s in [Stage::Corpus, Stage::Retrieve, Stage::Indicators] {
        p.run(s).unwrap();
    }
    let err = p.run(Stage::Eval).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { stage: "train", .. }), "{err}");
    assert!(err.to_string().contains("train"));
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn retrieve_on_an_empty_directory_names_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let err = Pipeline::new(tiny(dir.path())).unwrap().run(Stage::Retrieve).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { stage: "corpus", .. }));
}

#[test]
fn invalid_config_lists_every_violation() {
    let mut cfg = tiny(Path::new("unused"));
    cfg.retrieval.k = 0;
    cfg.model.n_heads = 3;
    cfg.workers = 0;
    let Err(err) = Pipeline::new(cfg) else { panic!("accepted a bad config") };
    let Error::Config(list) = &err else { panic!("{err}") };
    assert!(list.len() >= 3, "{list:?}");
    assert_eq!(exit_code(&err), 1);
}

#[test]
fn ablation_table_has_one_row_per_cell_and_setting() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.ablate.robust = vec![false, true];
    cfg.ablate.aggregations = vec![Aggregation::RetOnly, Aggregation::All];
    cfg.ablate.settings = vec![Setting::Normal, Setting::Extreme];
    let p = Pipeline::new(cfg).unwrap();
    for s in [Stage::Corpus, Stage::Retrieve, Stage::Indicators, Stage::Ablate] {
        p.run(s).unwrap();
    }
    let cells = p.ablation_cells();
    // {multiplicative, off} x {false, true} x {ret-only, all}
    assert_eq!(cells.len(), 2 * 2 * 2);
    assert!(cells.iter().any(|c| c.1 == Modulation::Off));
    let table = read(dir.path(), "ablate/ablation.csv");
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("cell_id,setting,f1,em"));
    assert_eq!(lines.count(), cells.len() * 2);
}

#[test]
fn order_study_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.ablate.order_study = true;
    let p = Pipeline::new(cfg).unwrap();
    for s in [Stage::Corpus, Stage::Retrieve, Stage::Indicators, Stage::Ablate] {
        p.run(s).unwrap();
    }
    let orders = read(dir.path(), "ablate/orders.csv");
    let rows: Vec<&str> = orders.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["original", "reverse", "shuffle", "noise"]);
}

#[test]
fn rerunning_a_stage_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path())).unwrap();
    for s in [Stage::Corpus, Stage::Retrieve, Stage::Indicators, Stage::Train] {
        p.run(s).unwrap();
    }
    let first = Manifest::read(dir.path(), "train").unwrap();
    p.run(Stage::Train).unwrap();
    assert_eq!(Manifest::read(dir.path(), "train").unwrap(), first);
}

#[test]
fn full_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(dir.path())).unwrap().run(Stage::All).unwrap();
    for f in [
        "train/model.ckpt",
        "train/train_log.csv",
        "eval/report_normal.json",
        "eval/records_extreme.csv",
        "eval/lists_noisy.jsonl",
        "eval/summary.csv",
        "sweep/sweep.csv",
        "ablate/ablation.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert_eq!(read(dir.path(), "sweep/sweep.csv").lines().count(), 3);
    assert!(read(dir.path(), "train/train_log.csv").starts_with("step,loss,grad_norm,lr\n"));
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "eval/report_noisy.json")).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 4 * 2);
    for stage in ["corpus", "retrieve", "indicators", "train", "eval", "sweep", "ablate"] {
        assert_eq!(Manifest::read(dir.path(), stage).unwrap().stage, stage);
    }
}

#[test]
fn stage_names_parse() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert!(matches!("nope".parse::<Stage>(), Err(Error::Config(_))));
}
