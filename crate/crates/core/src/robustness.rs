//! Noisy and fully irrelevant document lists for robust training and the
//! corrupted evaluation settings.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::indicators::hash_str;
use crate::jsonl;
use crate::retrieval::ScoredList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    #[default]
    Original,
    Reverse,
    Shuffle,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::Original => "original",
            Order::Reverse => "reverse",
            Order::Shuffle => "shuffle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Relevant,
    Partial,
    Irrelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoisyListSpec {
    pub n_relevant: usize,
    pub n_partial: usize,
    pub n_irrelevant: usize,
    pub order: Order,
    pub seed: u64,
}

impl Default for NoisyListSpec {
    fn default() -> Self {
        NoisyListSpec {
            n_relevant: 5,
            n_partial: 3,
            n_irrelevant: 2,
            order: Order::Original,
            seed: 0,
        }
    }
}

impl NoisyListSpec {
    /// The list length `k`.
    pub fn total(&self) -> usize {
        self.n_relevant + self.n_partial + self.n_irrelevant
    }

    /// Uncorrupted top-k in the given order.
    pub fn clean(k: usize, order: Order, seed: u64) -> Self {
        NoisyListSpec {
            n_relevant: k,
            n_partial: 0,
            n_irrelevant: 0,
            order,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListedDoc {
    pub doc_id: String,
    pub tag: Tag,
    /// 1-based position in the final list.
    pub position: usize,
    /// Retrieval score, carried in memory only.
    #[serde(skip)]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyList {
    pub qa_id: String,
    pub docs: Vec<ListedDoc>,
    pub seed: u64,
    pub order: Order,
}

impl NoisyList {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc_id.as_str())
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.docs.iter().filter(|d| d.tag == tag).count()
    }

    fn from_parts(qa_id: &str, parts: Vec<(String, Tag, f64)>, seed: u64, order: Order) -> Self {
        NoisyList {
            qa_id: qa_id.to_string(),
            docs: parts
                .into_iter()
                .enumerate()
                .map(|(i, (doc_id, tag, score))| ListedDoc {
                    doc_id,
                    tag,
                    position: i + 1,
                    score,
                })
                .collect(),
            seed,
            order,
        }
    }
}

/// Per-query generator so two queries sharing a seed draw independent samples.
fn query_rng(seed: u64, qa_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_str(seed, qa_id))
}

fn apply_order<T>(items: &mut [T], order: Order, rng: &mut ChaCha8Rng) {
    match order {
        Order::Original => {}
        Order::Reverse => items.reverse(),
        Order::Shuffle => items.shuffle(rng),
    }
}

fn outside_top_k<'a>(ranking: &ScoredList, k: usize, corpus: &'a Corpus) -> Vec<&'a str> {
    let top: HashSet<&str> = ranking.doc_ids().take(k).collect();
    corpus
        .docs()
        .iter()
        .map(|d| d.doc_id.as_str())
        .filter(|id| !top.contains(id))
        .collect()
}

/// Keeps ranks `1..=n_relevant`, draws `n_partial` documents uniformly
/// from ranks `n_relevant+1..=k` and `n_irrelevant` from the corpus outside
/// the top-k, then applies the order regime. In `Original` order the kept
/// and partial documents appear by rank, followed by the irrelevant ones.
/// `score` supplies retrieval scores for documents outside the ranking.
pub fn build_noisy_list(
    ranking: &ScoredList,
    corpus: &Corpus,
    spec: &NoisyListSpec,
    score: impl Fn(&str) -> f64,
) -> Result<NoisyList> {
    let k = spec.total();
    if k == 0 {
        return Err(Error::param("noisy_spec", "list length must be >= 1"));
    }
    if ranking.len() < k {
        return Err(Error::InsufficientPool {
            pool: "ranking",
            need: k,
            have: ranking.len(),
        });
    }
    let mut rng = query_rng(spec.seed, &ranking.qa_id);
    let top = &ranking.entries[..k];
    let mut parts: Vec<(String, Tag, f64)> = top[..spec.n_relevant]
        .iter()
        .map(|e| (e.doc_id.clone(), Tag::Relevant, e.score))
        .collect();

    let partial_pool = &top[spec.n_relevant..];
    let mut picks = index::sample(&mut rng, partial_pool.len(), spec.n_partial).into_vec();
    picks.sort_unstable();
    parts.extend(picks.into_iter().map(|i| {
        let e = &partial_pool[i];
        (e.doc_id.clone(), Tag::Partial, e.score)
    }));

    if spec.n_irrelevant > 0 {
        let pool = outside_top_k(ranking, k, corpus);
        if pool.len() < spec.n_irrelevant {
            return Err(Error::InsufficientPool {
                pool: "irrelevant",
                need: spec.n_irrelevant,
                have: pool.len(),
            });
        }
        for i in index::sample(&mut rng, pool.len(), spec.n_irrelevant) {
            let id = pool[i];
            parts.push((id.to_string(), Tag::Irrelevant, score(id)));
        }
    }
    apply_order(&mut parts, spec.order, &mut rng);
    Ok(NoisyList::from_parts(&ranking.qa_id, parts, spec.seed, spec.order))
}

/// `k` documents drawn uniformly from the corpus outside the query's top-k,
/// presented in descending retrieval score as a retriever would return them.
pub fn build_extreme_list(
    ranking: &ScoredList,
    corpus: &Corpus,
    k: usize,
    seed: u64,
    score: impl Fn(&str) -> f64,
) -> Result<NoisyList> {
    if ranking.len() < k {
        return Err(Error::InsufficientPool {
            pool: "ranking",
            need: k,
            have: ranking.len(),
        });
    }
    let pool = outside_top_k(ranking, k, corpus);
    if pool.len() < k {
        return Err(Error::InsufficientPool {
            pool: "irrelevant",
            need: k,
            have: pool.len(),
        });
    }
    let mut rng = query_rng(seed ^ 0x5eed_e47e, &ranking.qa_id);
    let mut parts: Vec<(String, Tag, f64)> = index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| (pool[i].to_string(), Tag::Irrelevant, score(pool[i])))
        .collect();
    parts.sort_by(|a, b| crate::retrieval::rank_order(a.2, &a.0, b.2, &b.0));
    Ok(NoisyList::from_parts(&ranking.qa_id, parts, seed, Order::Original))
}

pub fn write_noisy_lists(path: &Path, lists: &[NoisyList]) -> Result<()> {
    jsonl::write_lines(path, lists)
}

pub fn read_noisy_lists(path: &Path) -> Result<Vec<NoisyList>> {
    jsonl::read_lines(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn setup(n: usize, k: usize) -> (Corpus, ScoredList) {
        let docs: Vec<Document> = (0..n)
            .map(|i| Document {
                doc_id: format!("d{i:03}"),
                text: String::new(),
                tokens: vec![],
            })
            .collect();
        let scored = (0..k).map(|i| (format!("d{i:03}"), 1.0 - i as f64 * 0.05)).collect();
        (Corpus::new(docs).unwrap(), ScoredList::from_scores("q1", scored))
    }

    #[test]
    fn default_composition_keeps_the_head() {
        let (corpus, ranking) = setup(40, 10);
        let list = build_noisy_list(&ranking, &corpus, &NoisyListSpec::default(), |_| 0.0).unwrap();
        assert_eq!(list.len(), 10);
        let head: Vec<&str> = list.doc_ids().take(5).collect();
        assert_eq!(head, vec!["d000", "d001", "d002", "d003", "d004"]);
        assert_eq!(
            (list.count(Tag::Relevant), list.count(Tag::Partial), list.count(Tag::Irrelevant)),
            (5, 3, 2)
        );
        assert!(list.docs.iter().enumerate().all(|(i, d)| d.position == i + 1));
    }

    #[test]
    fn clean_spec_is_identity() {
        let (corpus, ranking) = setup(40, 10);
        let list = build_noisy_list(&ranking, &corpus, &NoisyListSpec::clean(10, Order::Original, 3), |_| 0.0).unwrap();
        assert!(list.doc_ids().eq(ranking.doc_ids()));
        let rev = build_noisy_list(&ranking, &corpus, &NoisyListSpec::clean(10, Order::Reverse, 3), |_| 0.0).unwrap();
        let expected: Vec<&str> = ranking.doc_ids().collect::<Vec<_>>().into_iter().rev().collect();
        assert!(rev.doc_ids().eq(expected));
    }

    #[test]
    fn pools_report_shortage_by_name() {
        let (corpus, ranking) = setup(11, 10);
        let err = build_noisy_list(&ranking, &corpus, &NoisyListSpec::default(), |_| 0.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientPool { pool: "irrelevant", need: 2, have: 1 }));
        let short = ranking.truncated(8);
        let err = build_noisy_list(&short, &corpus, &NoisyListSpec::default(), |_| 0.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientPool { pool: "ranking", .. }));
        assert!(build_extreme_list(&ranking, &corpus, 10, 0, |_| 0.0).is_err());
    }

    #[test]
    fn extreme_list_avoids_top_k() {
        let (corpus, ranking) = setup(60, 10);
        let a = build_extreme_list(&ranking, &corpus, 10, 4, |id| id.len() as f64).unwrap();
        let b = build_extreme_list(&ranking, &corpus, 10, 4, |id| id.len() as f64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let top: HashSet<&str> = ranking.doc_ids().collect();
        assert!(a.doc_ids().all(|id| !top.contains(id)));
    }

    #[test]
    fn file_schema_has_expected_keys() {
        let (corpus, ranking) = setup(40, 10);
        let list = build_noisy_list(&ranking, &corpus, &NoisyListSpec::default(), |_| 0.0).unwrap();
        let v = serde_json::to_value(&list).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, vec!["docs", "order", "qa_id", "seed"]);
        let doc_keys: Vec<&String> = v["docs"][0].as_object().unwrap().keys().collect();
        assert_eq!(doc_keys, vec!["doc_id", "position", "tag"]);
    }
}
