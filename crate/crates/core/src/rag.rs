//! Glue from a document list to a scored, segmented prompt: indicator
//! computation, normalization and score-matrix expansion in one place so
//! training and evaluation assemble inputs identically.

use crate::corpus::{Corpus, QaInstance, TokenId, UnkPolicy, Vocabulary};
use crate::error::{Error, Result};
use crate::indicators::{document_scores, score_qpp_proxy, IndicatorBundle, RankerProxy, ScoringConfig};
use crate::prompting::{expand_scores, PromptBuilder, ScoreMatrix, SegmentedPrompt};
use crate::retrieval::{Retriever, ScoredList};
use crate::robustness::NoisyList;

#[derive(Debug, Clone)]
pub struct Assembled {
    pub prompt: SegmentedPrompt,
    pub scores: ScoreMatrix,
    pub bundle: IndicatorBundle,
}

#[derive(Debug, Clone, Copy)]
pub struct Assembler<'a> {
    pub corpus: &'a Corpus,
    pub vocab: &'a Vocabulary,
    pub retriever: &'a Retriever,
    pub ranker: RankerProxy,
    pub builder: &'a PromptBuilder,
    pub scoring: ScoringConfig,
    pub unk: UnkPolicy,
}

impl<'a> Assembler<'a> {
    pub fn question_tokens(&self, qa: &QaInstance) -> Result<Vec<TokenId>> {
        self.vocab.tokenize(&qa.question, self.unk)
    }

    /// Indicator triples for `(doc_id, retrieval score)` pairs in list order.
    /// The QPP proxy sees the retrieval scores of exactly this list.
    pub fn bundle(&self, qa: &QaInstance, question: &[TokenId], docs: &[(&str, f64)]) -> Result<IndicatorBundle> {
        let ids: Vec<String> = docs.iter().map(|d| d.0.to_string()).collect();
        let ret: Vec<f64> = docs.iter().map(|d| d.1).collect();
        let rank = docs
            .iter()
            .map(|&(id, _)| {
                let doc = self.doc_tokens(id)?;
                Ok(self.ranker.score(&qa.qa_id, question, id, doc))
            })
            .collect::<Result<Vec<f64>>>()?;
        let qpp = score_qpp_proxy(&ret)?;
        Ok(IndicatorBundle::from_families(&qa.qa_id, &ids, &ret, &rank, &qpp))
    }

    pub fn bundle_for_ranking(&self, qa: &QaInstance, ranking: &ScoredList) -> Result<IndicatorBundle> {
        let question = self.question_tokens(qa)?;
        let docs: Vec<(&str, f64)> = ranking.entries.iter().map(|e| (e.doc_id.as_str(), e.score)).collect();
        self.bundle(qa, &question, &docs)
    }

    fn doc_tokens(&self, id: &str) -> Result<&'a [TokenId]> {
        self.corpus
            .get(id)
            .map(|d| d.tokens.as_slice())
            .ok_or_else(|| Error::MissingInput(format!("document `{id}` not in corpus")))
    }

    /// Prompt and score matrix for a list of `(doc_id, retrieval score)`;
    /// `answer` appends the answer segment for teacher forcing.
    pub fn assemble(&self, qa: &QaInstance, docs: &[(&str, f64)], answer: Option<&str>) -> Result<Assembled> {
        let question = self.question_tokens(qa)?;
        let bundle = self.bundle(qa, &question, docs)?;
        let doc_tokens = docs.iter().map(|&(id, _)| self.doc_tokens(id)).collect::<Result<Vec<_>>>()?;
        let answer_tokens = answer.map(|a| self.vocab.tokenize(a, self.unk)).transpose()?;
        let mut prompt = self.builder.build(&doc_tokens, &question, answer_tokens.as_deref())?;
        let doc_scores = document_scores(&bundle, &self.scoring)?;
        let scores = expand_scores(&mut prompt, &doc_scores)?;
        Ok(Assembled { prompt, scores, bundle })
    }

    pub fn assemble_ranking(&self, qa: &QaInstance, ranking: &ScoredList, answer: Option<&str>) -> Result<Assembled> {
        let docs: Vec<(&str, f64)> = ranking.entries.iter().map(|e| (e.doc_id.as_str(), e.score)).collect();
        self.assemble(qa, &docs, answer)
    }

    pub fn assemble_list(&self, qa: &QaInstance, list: &NoisyList, answer: Option<&str>) -> Result<Assembled> {
        let docs: Vec<(&str, f64)> = list.docs.iter().map(|d| (d.doc_id.as_str(), d.score)).collect();
        self.assemble(qa, &docs, answer)
    }

    /// Retrieval score of an arbitrary corpus document for this query.
    pub fn scorer(&self, qa: &QaInstance) -> Result<impl Fn(&str) -> f64 + 'a> {
        let q = self.retriever.embed_query(qa, self.vocab, self.unk)?;
        let retriever = self.retriever;
        Ok(move |id: &str| retriever.score(&q, id).unwrap_or(0.0))
    }
}
