//! Hashed bag-of-tokens embeddings and exhaustive cosine top-k retrieval.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QaInstance, TokenId, UnkPolicy, Vocabulary};
use crate::error::{Error, Result};
use crate::jsonl;

pub const DEFAULT_DIM: usize = 64;

const TOKEN_VECTOR_SALT: u64 = 0x5eed_0f_7e_c7_0a5;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    /// Cosine similarity; 0 when either side is the zero vector.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

/// Fixed pseudo-random unit vector for one vocabulary index.
pub fn token_vector(id: TokenId, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(TOKEN_VECTOR_SALT ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Sum of the token vectors, L2-normalized when nonzero.
pub fn embed(tokens: &[TokenId], dim: usize) -> Embedding {
    let mut acc = vec![0.0; dim];
    for &t in tokens {
        for (a, x) in acc.iter_mut().zip(token_vector(t, dim)) {
            *a += x;
        }
    }
    normalize_in_place(&mut acc);
    Embedding(acc)
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredList {
    pub qa_id: String,
    #[serde(rename = "ranking")]
    pub entries: Vec<RankedDoc>,
}

impl ScoredList {
    /// Sorts `(doc_id, score)` pairs by score descending, doc_id ascending
    /// on ties, and assigns ranks 1..=n.
    pub fn from_scores(qa_id: impl Into<String>, mut scored: Vec<(String, f64)>) -> Self {
        scored.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
        ScoredList {
            qa_id: qa_id.into(),
            entries: scored
                .into_iter()
                .enumerate()
                .map(|(i, (doc_id, score))| RankedDoc {
                    doc_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// First `k` entries.
    pub fn truncated(&self, k: usize) -> ScoredList {
        ScoredList {
            qa_id: self.qa_id.clone(),
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }
}

pub(crate) fn rank_order(sa: f64, ida: &str, sb: f64, idb: &str) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ida.cmp(idb))
}

/// Precomputed document embeddings over one corpus.
#[derive(Debug, Clone)]
pub struct Retriever {
    dim: usize,
    table: Vec<Vec<f64>>,
    doc_ids: Vec<String>,
    doc_embeddings: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl Retriever {
    pub fn new(corpus: &Corpus, vocab_size: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be >= 1"));
        }
        let table: Vec<Vec<f64>> = (0..vocab_size as TokenId).map(|t| token_vector(t, dim)).collect();
        let mut r = Retriever {
            dim,
            table,
            doc_ids: Vec::with_capacity(corpus.len()),
            doc_embeddings: Vec::with_capacity(corpus.len()),
            index: HashMap::with_capacity(corpus.len()),
        };
        for d in corpus.docs() {
            let e = r.embed(&d.tokens);
            r.index.insert(d.doc_id.clone(), r.doc_ids.len());
            r.doc_ids.push(d.doc_id.clone());
            r.doc_embeddings.push(e);
        }
        Ok(r)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Same result as [`embed`], served from the cached token table.
    pub fn embed(&self, tokens: &[TokenId]) -> Embedding {
        let mut acc = vec![0.0; self.dim];
        for &t in tokens {
            let v = match self.table.get(t as usize) {
                Some(v) => std::borrow::Cow::Borrowed(v),
                None => std::borrow::Cow::Owned(token_vector(t, self.dim)),
            };
            for (a, x) in acc.iter_mut().zip(v.iter()) {
                *a += x;
            }
        }
        normalize_in_place(&mut acc);
        Embedding(acc)
    }

    pub fn embed_query(&self, qa: &QaInstance, vocab: &Vocabulary, policy: UnkPolicy) -> Result<Embedding> {
        Ok(self.embed(&vocab.tokenize(&qa.question, policy)?))
    }

    /// Cosine score of one document, used for on-demand scoring of sampled
    /// documents outside a ranking.
    pub fn score(&self, query: &Embedding, doc_id: &str) -> Option<f64> {
        self.index.get(doc_id).map(|&i| query.cosine(&self.doc_embeddings[i]))
    }

    pub fn score_all(&self, query: &Embedding) -> Vec<(String, f64)> {
        self.doc_ids
            .iter()
            .zip(&self.doc_embeddings)
            .map(|(id, e)| (id.clone(), query.cosine(e)))
            .collect()
    }

    pub fn retrieve(&self, qa_id: &str, query: &Embedding, k: usize) -> Result<ScoredList> {
        if self.doc_ids.is_empty() {
            return Err(Error::param("corpus", "empty corpus"));
        }
        if k > self.doc_ids.len() {
            return Err(Error::param(
                "k",
                format!("k={k} exceeds corpus size {}", self.doc_ids.len()),
            ));
        }
        let mut list = ScoredList::from_scores(qa_id, self.score_all(query));
        list.entries.truncate(k);
        Ok(list)
    }

    pub fn retrieve_qa(&self, qa: &QaInstance, vocab: &Vocabulary, k: usize, policy: UnkPolicy) -> Result<ScoredList> {
        let q = self.embed_query(qa, vocab, policy)?;
        self.retrieve(&qa.qa_id, &q, k)
    }
}

pub fn write_rankings(path: &Path, lists: &[ScoredList]) -> Result<()> {
    jsonl::write_lines(path, lists)
}

pub fn read_rankings(path: &Path) -> Result<Vec<ScoredList>> {
    jsonl::read_lines(path)
}
