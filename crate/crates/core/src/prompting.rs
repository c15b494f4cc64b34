//! Segmented prompt assembly and expansion of segment scores into the
//! token-level modulation matrix.
//!
//! Layout: `BOS instruction SEP doc_1 SEP ... doc_k SEP query SEP [answer EOS]`.
//! Each separator belongs to the segment it closes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::indicators::NormalizedScores;

pub const DEFAULT_INSTRUCTION: &str = "You should answer the question by referring to the retrieved \
knowledge provided below and integrating the usefulness of your own parametric knowledge. Just \
directly answer it as a short answer without any explanation.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Instruction,
    /// 1-based position of the document in the prompt.
    Doc(usize),
    Query,
    Answer,
}

impl SegmentKind {
    pub fn label(self) -> String {
        match self {
            SegmentKind::Instruction => "instruction".into(),
            SegmentKind::Doc(i) => format!("doc{i}"),
            SegmentKind::Query => "query".into(),
            SegmentKind::Answer => "answer".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedPrompt {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    /// One score per non-answer segment, in segment order.
    pub segment_scores: Vec<f64>,
}

impl SegmentedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn answer_segment(&self) -> Option<Segment> {
        self.segments.iter().copied().find(|s| s.kind == SegmentKind::Answer)
    }

    pub fn doc_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| matches!(s.kind, SegmentKind::Doc(_)))
    }

    pub fn n_docs(&self) -> usize {
        self.doc_segments().count()
    }

    /// Prompt without its answer segment, as seen at generation time.
    pub fn without_answer(&self) -> SegmentedPrompt {
        match self.answer_segment() {
            None => self.clone(),
            Some(a) => SegmentedPrompt {
                tokens: self.tokens[..a.start].to_vec(),
                segments: self.segments.iter().copied().filter(|s| s.kind != SegmentKind::Answer).collect(),
                segment_scores: self.segment_scores.clone(),
            },
        }
    }

    /// Per-token score: the score of the segment owning the token; answer
    /// tokens score 1.
    pub fn token_scores(&self) -> Vec<f64> {
        let mut out = vec![1.0; self.tokens.len()];
        let mut scored = 0;
        for seg in &self.segments {
            if seg.kind == SegmentKind::Answer {
                continue;
            }
            let s = self.segment_scores[scored];
            scored += 1;
            out[seg.start..seg.end].iter_mut().for_each(|x| *x = s);
        }
        out
    }

    /// One line per token: index, token, segment, score.
    pub fn debug_dump(&self, vocab: &Vocabulary) -> String {
        let scores = self.token_scores();
        let mut out = String::new();
        for seg in &self.segments {
            for i in seg.start..seg.end {
                let tok = vocab.token(self.tokens[i]).unwrap_or("<unk>");
                let _ = writeln!(out, "{i}\t{tok}\t{}\t{:.6}", seg.kind.label(), scores[i]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBuilder {
    pub instruction: Vec<TokenId>,
    pub max_context: usize,
    /// Permit prompts without documents.
    pub no_rag: bool,
}

impl PromptBuilder {
    pub fn new(instruction: Vec<TokenId>, max_context: usize) -> Self {
        PromptBuilder {
            instruction,
            max_context,
            no_rag: false,
        }
    }

    pub fn build(
        &self,
        docs: &[&[TokenId]],
        query: &[TokenId],
        answer: Option<&[TokenId]>,
    ) -> Result<SegmentedPrompt> {
        if docs.is_empty() && !self.no_rag {
            return Err(Error::param("docs", "no documents given and no-RAG mode is off"));
        }
        let doc_len: usize = docs.iter().map(|d| d.len() + 1).sum();
        let total = 2 + self.instruction.len() + doc_len + query.len() + 1 + answer.map_or(0, |a| a.len() + 1);
        if total > self.max_context {
            return Err(Error::ContextOverflow {
                len: total,
                limit: self.max_context,
                detail: format!(
                    "instruction {} + {} docs totalling {} + query {} + answer {}",
                    self.instruction.len(),
                    docs.len(),
                    doc_len,
                    query.len(),
                    answer.map_or(0, |a| a.len() + 1)
                ),
            });
        }

        let mut tokens = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(docs.len() + 3);
        let mut push = |kind: SegmentKind, body: &[TokenId], lead: Option<TokenId>, tail: TokenId, tokens: &mut Vec<TokenId>| {
            let start = tokens.len();
            tokens.extend(lead);
            tokens.extend_from_slice(body);
            tokens.push(tail);
            segments.push(Segment {
                kind,
                start,
                end: tokens.len(),
            });
        };
        push(SegmentKind::Instruction, &self.instruction, Some(BOS), SEP, &mut tokens);
        for (i, d) in docs.iter().enumerate() {
            push(SegmentKind::Doc(i + 1), d, None, SEP, &mut tokens);
        }
        push(SegmentKind::Query, query, None, SEP, &mut tokens);
        if let Some(a) = answer {
            push(SegmentKind::Answer, a, None, EOS, &mut tokens);
        }
        let segment_scores = vec![1.0; docs.len() + 2];
        Ok(SegmentedPrompt {
            tokens,
            segments,
            segment_scores,
        })
    }
}

/// Token-level modulation matrix. Rows index the attending (query)
/// position, columns the attended (key) position.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    repr: Repr,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    /// Every row equals this per-token vector.
    KeyBroadcast(Vec<f64>),
    Dense(Vec<f64>),
}

impl ScoreMatrix {
    pub fn ones(n: usize) -> Self {
        Self::key_broadcast(vec![1.0; n])
    }

    pub fn key_broadcast(token_scores: Vec<f64>) -> Self {
        ScoreMatrix {
            n: token_scores.len(),
            repr: Repr::KeyBroadcast(token_scores),
        }
    }

    /// Arbitrary row-major `n x n` matrix.
    pub fn dense(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Shape(format!("dense score matrix needs {} entries, got {}", n * n, entries.len())));
        }
        Ok(ScoreMatrix {
            n,
            repr: Repr::Dense(entries),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        match &self.repr {
            Repr::KeyBroadcast(v) => v,
            Repr::Dense(e) => &e[i * self.n..(i + 1) * self.n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i)[j]
    }

    pub fn is_key_broadcast(&self) -> bool {
        matches!(self.repr, Repr::KeyBroadcast(_))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.n).flat_map(|i| self.row(i).iter().copied()).collect()
    }

    /// Every entry lies in (0, 1].
    pub fn is_valid(&self) -> bool {
        let check = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x <= 1.0);
        match &self.repr {
            Repr::KeyBroadcast(v) => check(v),
            Repr::Dense(e) => check(e),
        }
    }

    /// Appends one position with score 1 as both key and query.
    pub fn extended(&self) -> ScoreMatrix {
        match &self.repr {
            Repr::KeyBroadcast(v) => {
                let mut v = v.clone();
                v.push(1.0);
                ScoreMatrix::key_broadcast(v)
            }
            Repr::Dense(e) => {
                let n = self.n;
                let mut out = Vec::with_capacity((n + 1) * (n + 1));
                for i in 0..n {
                    out.extend_from_slice(&e[i * n..(i + 1) * n]);
                    out.push(1.0);
                }
                if n > 0 {
                    out.extend_from_slice(&e[(n - 1) * n..n * n]);
                }
                out.push(1.0);
                ScoreMatrix {
                    n: n + 1,
                    repr: Repr::Dense(out),
                }
            }
        }
    }
}

/// Writes one score per document segment into the prompt and returns the
/// key-side broadcast of the resulting per-token scores.
pub fn expand_scores(prompt: &mut SegmentedPrompt, doc_scores: &NormalizedScores) -> Result<ScoreMatrix> {
    let n_docs = prompt.n_docs();
    if doc_scores.values.len() != n_docs {
        return Err(Error::Shape(format!(
            "{} document scores for {} document segments",
            doc_scores.values.len(),
            n_docs
        )));
    }
    if let Some(bad) = doc_scores.values.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::param("doc_scores", format!("score {bad} outside (0, 1]")));
    }
    let mut doc_iter = doc_scores.values.iter();
    let mut idx = 0;
    for seg in &prompt.segments {
        match seg.kind {
            SegmentKind::Answer => continue,
            SegmentKind::Doc(_) => prompt.segment_scores[idx] = *doc_iter.next().unwrap(),
            SegmentKind::Instruction | SegmentKind::Query => prompt.segment_scores[idx] = 1.0,
        }
        idx += 1;
    }
    Ok(ScoreMatrix::key_broadcast(prompt.token_scores()))
}
