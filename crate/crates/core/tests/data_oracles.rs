//! Corpus, retrieval, indicator and noisy-list checks against brute-force
//! recomputation.

mod common;

use std::collections::{HashMap, HashSet};

use opendec_core::corpus::{generate_corpus, Corpus, UnkPolicy};
use opendec_core::indicators::score_qpp_proxy;
use opendec_core::retrieval::{embed, Retriever};
use opendec_core::robustness::{build_extreme_list, build_noisy_list, NoisyListSpec, Order, Tag};
use rand::Rng;

#[test]
fn distractors_never_contain_a_gold_answer() {
    let g = generate_corpus(7, 10, 3, 50).unwrap();
    assert_eq!(g.corpus.len(), 80);
    assert_eq!(g.qas.len(), 30);
    let golds: Vec<String> = g.qas.iter().flat_map(|q| q.gold_answers.iter().map(|a| a.to_lowercase())).collect();
    let gold_ids: HashSet<&str> = g.qas.iter().flat_map(|q| q.gold_doc_ids.iter().map(|s| s.as_str())).collect();
    let distractors: Vec<_> = g.corpus.docs().iter().filter(|d| !gold_ids.contains(d.doc_id.as_str())).collect();
    assert_eq!(distractors.len(), 50);
    for d in distractors {
        let text = d.text.to_lowercase();
        for a in &golds {
            assert!(!text.contains(a.as_str()), "{} leaks `{a}`", d.doc_id);
        }
    }
}

#[test]
fn every_question_is_answerable_from_its_gold_document() {
    let g = generate_corpus(7, 50, 3, 100).unwrap();
    for qa in &g.qas {
        let found = qa.gold_doc_ids.iter().any(|id| {
            let text = g.corpus.get(id).unwrap().text.to_lowercase();
            qa.gold_answers.iter().any(|a| text.contains(&a.to_lowercase()))
        });
        assert!(found, "{} has no answer in its gold documents", qa.qa_id);
    }
}

#[test]
fn generation_is_byte_identical() {
    let a = generate_corpus(7, 20, 2, 40).unwrap();
    let b = generate_corpus(7, 20, 2, 40).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.corpus.write(&dir.path().join("a")).unwrap();
    b.corpus.write(&dir.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a")).unwrap(),
        std::fs::read(dir.path().join("b")).unwrap()
    );
    assert_eq!(a.vocab.tokens(), b.vocab.tokens());
}

fn random_corpus(seed: u64) -> (Corpus, opendec_core::corpus::Vocabulary) {
    let g = generate_corpus(seed, 10, 2, 30).unwrap();
    (g.corpus, g.vocab)
}

#[test]
fn retrieval_matches_brute_force() {
    let (corpus, vocab) = random_corpus(11);
    let docs: Vec<_> = corpus.docs().iter().take(50).cloned().collect();
    let corpus = Corpus::new(docs).unwrap();
    let retriever = Retriever::new(&corpus, vocab.len(), 64).unwrap();
    let mut r = common::rng(5);
    for _ in 0..20 {
        let q: Vec<u32> = (0..5).map(|_| r.gen_range(4..vocab.len() as u32)).collect();
        let qe = embed(&q, 64);
        // Score every document from scratch and sort with the documented
        // tie-break.
        let mut brute: Vec<(String, f64)> = corpus
            .docs()
            .iter()
            .map(|d| {
                let de = embed(&d.tokens, 64);
                let dot: f64 = qe.0.iter().zip(&de.0).map(|(a, b)| a * b).sum();
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let (nq, nd) = (norm(&qe.0), norm(&de.0));
                (d.doc_id.clone(), if nq == 0.0 || nd == 0.0 { 0.0 } else { dot / (nq * nd) })
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let got = retriever.retrieve("q", &qe, 10).unwrap();
        for (i, e) in got.entries.iter().enumerate() {
            assert_eq!(e.doc_id, brute[i].0);
            assert!((e.score - brute[i].1).abs() < 1e-12);
            assert_eq!(e.rank, i + 1);
        }
    }
}

#[test]
fn qpp_matches_definition() {
    let mut r = common::rng(9);
    for _ in 0..50 {
        let scores: Vec<f64> = (0..10).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mean = scores.iter().sum::<f64>() / 10.0;
        let sd = (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / 10.0).sqrt();
        let p = sd.clamp(1e-3, 1.0 - 1e-3);
        let shared = (p / (1.0 - p)).ln();
        let got = score_qpp_proxy(&scores).unwrap();
        for (g, s) in got.iter().zip(&scores) {
            assert!((g - (shared + s - mean)).abs() < 1e-12);
        }
    }
}

struct Fixture {
    corpus: Corpus,
    retriever: Retriever,
    rankings: Vec<opendec_core::retrieval::ScoredList>,
    queries: Vec<opendec_core::retrieval::Embedding>,
}

fn fixture() -> Fixture {
    let g = generate_corpus(7, 30, 3, 200).unwrap();
    let retriever = Retriever::new(&g.corpus, g.vocab.len(), 64).unwrap();
    let mut rankings = Vec::new();
    let mut queries = Vec::new();
    for qa in g.qas.iter().take(20) {
        let qe = retriever.embed_query(qa, &g.vocab, UnkPolicy::Reject).unwrap();
        rankings.push(retriever.retrieve(&qa.qa_id, &qe, 10).unwrap());
        queries.push(qe);
    }
    Fixture {
        corpus: g.corpus,
        retriever,
        rankings,
        queries,
    }
}

#[test]
fn noisy_composition_and_pool_disjointness() {
    let f = fixture();
    for (ranking, qe) in f.rankings.iter().zip(&f.queries) {
        for seed in 0..20 {
            for order in [Order::Original, Order::Reverse, Order::Shuffle] {
                let spec = NoisyListSpec { order, seed, ..Default::default() };
                let list = build_noisy_list(ranking, &f.corpus, &spec, |id| f.retriever.score(qe, id).unwrap()).unwrap();
                assert_eq!(list.len(), 10);
                assert_eq!((list.count(Tag::Relevant), list.count(Tag::Partial), list.count(Tag::Irrelevant)), (5, 3, 2));
                let ids: HashSet<&str> = list.doc_ids().collect();
                assert_eq!(ids.len(), 10, "duplicate documents");
                let rank_of: HashMap<&str, usize> = ranking.entries.iter().map(|e| (e.doc_id.as_str(), e.rank)).collect();
                for d in &list.docs {
                    match d.tag {
                        Tag::Relevant => assert!(rank_of[d.doc_id.as_str()] <= 5),
                        Tag::Partial => assert!((6..=10).contains(&rank_of[d.doc_id.as_str()])),
                        Tag::Irrelevant => assert!(!rank_of.contains_key(d.doc_id.as_str())),
                    }
                }
            }
        }
    }
}

#[test]
fn reverse_maps_position_i_to_k_plus_one_minus_i() {
    let f = fixture();
    let ranking = &f.rankings[0];
    let score = |id: &str| f.retriever.score(&f.queries[0], id).unwrap();
    let fwd = build_noisy_list(ranking, &f.corpus, &NoisyListSpec { seed: 3, ..Default::default() }, score).unwrap();
    let rev = build_noisy_list(
        ranking,
        &f.corpus,
        &NoisyListSpec { seed: 3, order: Order::Reverse, ..Default::default() },
        score,
    )
    .unwrap();
    let k = fwd.len();
    for i in 0..k {
        assert_eq!(fwd.docs[i].doc_id, rev.docs[k - 1 - i].doc_id);
    }
    let shuf = build_noisy_list(
        ranking,
        &f.corpus,
        &NoisyListSpec { seed: 3, order: Order::Shuffle, ..Default::default() },
        score,
    )
    .unwrap();
    let mut a: Vec<&str> = fwd.doc_ids().collect();
    let mut b: Vec<&str> = shuf.doc_ids().collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn partial_candidates_are_sampled_uniformly() {
    let f = fixture();
    let ranking = &f.rankings[0];
    let score = |id: &str| f.retriever.score(&f.queries[0], id).unwrap();
    let mut hits: HashMap<String, usize> = HashMap::new();
    for seed in 0..1000 {
        let list = build_noisy_list(ranking, &f.corpus, &NoisyListSpec { seed, ..Default::default() }, score).unwrap();
        for d in list.docs.iter().filter(|d| d.tag == Tag::Partial) {
            *hits.entry(d.doc_id.clone()).or_default() += 1;
        }
    }
    for e in &ranking.entries[5..10] {
        let freq = hits.get(&e.doc_id).copied().unwrap_or(0) as f64 / 1000.0;
        assert!((freq - 0.6).abs() <= 0.05, "rank {} picked with frequency {freq}", e.rank);
    }
}

#[test]
fn extreme_lists_are_disjoint_from_top_k_and_seeded() {
    let f = fixture();
    for (ranking, qe) in f.rankings.iter().zip(&f.queries) {
        let score = |id: &str| f.retriever.score(qe, id).unwrap();
        let top: HashSet<&str> = ranking.doc_ids().collect();
        for seed in 0..10 {
            let a = build_extreme_list(ranking, &f.corpus, 10, seed, score).unwrap();
            assert_eq!(a.len(), 10);
            assert!(a.doc_ids().all(|id| !top.contains(id)));
            assert!(a.docs.iter().all(|d| d.tag == Tag::Irrelevant));
            let b = build_extreme_list(ranking, &f.corpus, 10, seed, score).unwrap();
            assert_eq!(a, b);
        }
    }
}
