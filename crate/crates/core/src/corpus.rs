//! Synthetic fact corpus, QA instances and the word-level tokenizer.
//!
//! Every entity/relation pair yields one fact document ("The capital of
//! Zorvan is Kelith.") and one question asking for the object. Distractor
//! documents reuse entity names and filler vocabulary but never contain an
//! answer string.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::prompting::DEFAULT_INSTRUCTION;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
/// Always present at index 4; only emitted under [`UnkPolicy::MapToUnk`].
pub const UNK_TOKEN: &str = "<unk>";

/// What to do with a word the vocabulary does not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnkPolicy {
    #[default]
    Reject,
    MapToUnk,
}

/// Lowercase, drop everything that is neither alphanumeric nor whitespace,
/// split on whitespace.
pub fn canonical_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

pub fn canonicalize(text: &str) -> String {
    canonical_words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials, then `<unk>`, then the sorted distinct canonical words of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(canonical_words).collect();
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once(UNK_TOKEN.to_string()))
            .chain(words.into_iter().filter(|w| !is_reserved(w)))
            .collect();
        Self::from_token_list(tokens).expect("constructed vocabulary is valid")
    }

    /// Rebuild from an ordered token list (line number = index).
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::param("vocab", "fewer tokens than the reserved set"));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(Error::param(
                    "vocab",
                    format!("line {i} must be `{special}`, found `{}`", tokens[i]),
                ));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::param("vocab", format!("duplicate token `{tok}`")));
            }
        }
        if !index.contains_key(UNK_TOKEN) {
            return Err(Error::param("vocab", "missing <unk>"));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> TokenId {
        self.index[UNK_TOKEN]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str, policy: UnkPolicy) -> Result<Vec<TokenId>> {
        canonical_words(text)
            .into_iter()
            .map(|w| match (self.id(&w), policy) {
                (Some(id), _) => Ok(id),
                (None, UnkPolicy::MapToUnk) => Ok(self.unk_id()),
                (None, UnkPolicy::Reject) => Err(Error::UnknownToken(w)),
            })
            .collect()
    }

    /// Inverse of [`Vocabulary::tokenize`] on canonical text. Unknown ids
    /// render as `<unk>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        jsonl::write_bytes(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_token_list(text.lines().map(str::to_owned).collect())
    }
}

fn is_reserved(word: &str) -> bool {
    SPECIAL_TOKENS.contains(&word) || word == UNK_TOKEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub qa_id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    pub gold_doc_ids: Vec<String>,
}

/// Ordered document collection with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::param("corpus", format!("duplicate doc_id `{}`", d.doc_id)));
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write_lines(path, &self.docs)
    }

    /// Loads documents and tokenizes them against `vocab`.
    pub fn read(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let mut docs: Vec<Document> = jsonl::read_lines(path)?;
        for d in &mut docs {
            d.tokens = vocab.tokenize(&d.text, UnkPolicy::Reject)?;
        }
        Corpus::new(docs)
    }
}

pub fn write_qas(path: &Path, qas: &[QaInstance]) -> Result<()> {
    jsonl::write_lines(path, qas)
}

pub fn read_qas(path: &Path) -> Result<Vec<QaInstance>> {
    jsonl::read_lines(path)
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub qas: Vec<QaInstance>,
    pub vocab: Vocabulary,
}

struct RelationTemplate {
    doc: &'static str,
    question: &'static str,
}

const RELATIONS: &[RelationTemplate] = &[
    RelationTemplate { doc: "The capital of {e} is {o}.", question: "What is the capital of {e}?" },
    RelationTemplate { doc: "{e} was founded by {o}.", question: "Who founded {e}?" },
    RelationTemplate { doc: "The river flowing through {e} is the {o}.", question: "Which river flows through {e}?" },
    RelationTemplate { doc: "People in {e} mostly speak {o}.", question: "What language do people in {e} speak?" },
    RelationTemplate { doc: "The currency used in {e} is the {o}.", question: "What currency is used in {e}?" },
    RelationTemplate { doc: "The highest mountain in {e} is {o}.", question: "What is the highest mountain in {e}?" },
    RelationTemplate { doc: "{e} is governed by {o}.", question: "Who governs {e}?" },
    RelationTemplate { doc: "The main export of {e} is {o}.", question: "What is the main export of {e}?" },
];

pub const MAX_RELATIONS: usize = RELATIONS.len();

const DISTRACTOR_TEMPLATES: &[&str] = &[
    "{e} is known for its {a} {n}.",
    "Travelers describe {e} as {a} and {a2}.",
    "A {a} {n} was seen near {e}.",
    "The {n} of {e} is {a}.",
    "Many {n}s gather by the {a} {n2}.",
    "In {e} the {n} is always {a}.",
    "Stories about {e} mention a {a} {n}.",
    "The {a} {n} rests beside the {n2}.",
];

const ADJECTIVES: &[&str] = &[
    "quiet", "ancient", "golden", "narrow", "windy", "crowded", "distant", "bright", "humble",
    "broken", "silver", "gentle", "frozen", "hidden", "famous", "muddy", "proud", "rusty",
    "sleepy", "tall", "wooden", "hollow", "busy", "sunny", "patient", "curious", "empty",
    "heavy", "lucky", "modern",
];

const NOUNS: &[&str] = &[
    "harbor", "market", "bridge", "garden", "tower", "festival", "library", "orchard", "castle",
    "meadow", "lantern", "village", "fountain", "wagon", "temple", "school", "forest", "canal",
    "bakery", "theater", "station", "stadium", "chapel", "museum", "valley", "island", "palace",
    "workshop", "tavern", "gate",
];

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr",
    "tr", "st", "th", "sh", "gl", "pl", "qu",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "ia", "ou", "y"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "th", "l", "x", "nd"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for i in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        if i + 1 == syllables || rng.gen_bool(0.3) {
            w.push_str(CODAS.choose(rng).unwrap());
        }
    }
    w
}

fn capitalize(w: &str) -> String {
    let mut cs = w.chars();
    match cs.next() {
        Some(c) => c.to_uppercase().chain(cs).collect(),
        None => String::new(),
    }
}

/// Pool of generated names; no name is a substring of another name or of
/// any fixed lexicon word.
struct NamePool {
    fixed: Vec<String>,
    names: Vec<String>,
}

impl NamePool {
    fn new() -> Self {
        let mut fixed: Vec<String> = ADJECTIVES
            .iter()
            .chain(NOUNS.iter())
            .map(|s| s.to_string())
            .collect();
        for t in RELATIONS {
            fixed.extend(canonical_words(t.doc));
            fixed.extend(canonical_words(t.question));
        }
        for t in DISTRACTOR_TEMPLATES {
            fixed.extend(canonical_words(t));
        }
        fixed.extend(canonical_words(DEFAULT_INSTRUCTION));
        fixed.extend(NOUNS.iter().map(|n| format!("{n}s")));
        NamePool {
            fixed,
            names: Vec::new(),
        }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng, min_syllables: usize) -> String {
        loop {
            let syl = min_syllables + rng.gen_range(0..2);
            let w = pseudo_word(rng, syl);
            let clash = self.fixed.iter().any(|f| f.contains(&w) || f == &w)
                || self
                    .names
                    .iter()
                    .any(|n| n.contains(&w) || w.contains(n.as_str()));
            if !clash {
                self.names.push(w.clone());
                return w;
            }
        }
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(k, v);
    }
    s
}

/// Deterministic synthetic corpus: one fact document and one question per
/// (entity, relation) pair plus `n_distractors` answer-free documents.
pub fn generate_corpus(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_distractors: usize,
) -> Result<GeneratedCorpus> {
    if n_entities < 2 {
        return Err(Error::param("n_entities", format!("must be >= 2, got {n_entities}")));
    }
    if n_relations == 0 || n_relations > MAX_RELATIONS {
        return Err(Error::param(
            "n_relations",
            format!("must be in 1..={MAX_RELATIONS}, got {n_relations}"),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = NamePool::new();

    let entities: Vec<String> = (0..n_entities)
        .map(|_| capitalize(&pool.fresh(&mut rng, 2)))
        .collect();

    let mut docs = Vec::with_capacity(n_entities * n_relations + n_distractors);
    let mut qas = Vec::with_capacity(n_entities * n_relations);
    let mut answers = Vec::with_capacity(n_entities * n_relations);
    for (ei, entity) in entities.iter().enumerate() {
        for (ri, rel) in RELATIONS.iter().take(n_relations).enumerate() {
            let n_words = match rng.gen_range(0..20) {
                0 => 3,
                1..=4 => 2,
                _ => 1,
            };
            let object = (0..n_words)
                .map(|_| capitalize(&pool.fresh(&mut rng, 2)))
                .collect::<Vec<_>>()
                .join(" ");
            let doc_id = format!("fact-{ei:04}-{ri}");
            docs.push(Document {
                doc_id: doc_id.clone(),
                text: fill(rel.doc, &[("{e}", entity), ("{o}", &object)]),
                tokens: Vec::new(),
            });
            qas.push(QaInstance {
                qa_id: format!("qa-{ei:04}-{ri}"),
                question: fill(rel.question, &[("{e}", entity)]),
                gold_answers: vec![object.clone()],
                gold_doc_ids: vec![doc_id],
            });
            answers.push(object.to_lowercase());
        }
    }

    let mut made = 0;
    while made < n_distractors {
        let template = DISTRACTOR_TEMPLATES.choose(&mut rng).unwrap();
        let text = fill(
            template,
            &[
                ("{e}", entities.choose(&mut rng).unwrap()),
                ("{a2}", ADJECTIVES.choose(&mut rng).unwrap()),
                ("{a}", ADJECTIVES.choose(&mut rng).unwrap()),
                ("{n2}", NOUNS.choose(&mut rng).unwrap()),
                ("{n}", NOUNS.choose(&mut rng).unwrap()),
            ],
        );
        let lower = text.to_lowercase();
        if answers.iter().any(|a| lower.contains(a.as_str())) {
            continue;
        }
        docs.push(Document {
            doc_id: format!("dist-{made:05}"),
            text: capitalize(&text),
            tokens: Vec::new(),
        });
        made += 1;
    }

    let vocab = Vocabulary::from_texts(
        docs.iter()
            .map(|d| d.text.as_str())
            .chain(qas.iter().map(|q| q.question.as_str()))
            .chain(std::iter::once(DEFAULT_INSTRUCTION)),
    );
    for d in &mut docs {
        d.tokens = vocab.tokenize(&d.text, UnkPolicy::Reject)?;
    }
    Ok(GeneratedCorpus {
        corpus: Corpus::new(docs)?,
        qas,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_corpus_counts() {
        let g = generate_corpus(7, 2, 1, 0).unwrap();
        assert_eq!(g.corpus.len(), 2);
        assert_eq!(g.qas.len(), 2);
        for qa in &g.qas {
            let containing: Vec<_> = g
                .corpus
                .docs()
                .iter()
                .filter(|d| d.text.contains(&qa.gold_answers[0]))
                .collect();
            assert_eq!(containing.len(), 1);
            assert_eq!(containing[0].doc_id, qa.gold_doc_ids[0]);
        }
    }

    #[test]
    fn rejects_zero_counts() {
        assert!(matches!(
            generate_corpus(1, 0, 1, 0),
            Err(Error::Param { name: "n_entities", .. })
        ));
        assert!(matches!(
            generate_corpus(1, 3, 0, 0),
            Err(Error::Param { name: "n_relations", .. })
        ));
    }

    #[test]
    fn tokenize_round_trip() {
        let vocab = Vocabulary::from_texts(["Paris is capital"]);
        assert!(vocab.tokenize("", UnkPolicy::Reject).unwrap().is_empty());
        let ids = vocab.tokenize("Paris is capital", UnkPolicy::Reject).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(vocab.detokenize(&ids), "paris is capital");
    }

    #[test]
    fn unknown_word_is_named() {
        let vocab = Vocabulary::from_texts(["paris is capital"]);
        match vocab.tokenize("paris is lovely", UnkPolicy::Reject) {
            Err(Error::UnknownToken(w)) => assert_eq!(w, "lovely"),
            other => panic!("expected unknown token error, got {other:?}"),
        }
        let ids = vocab.tokenize("paris is lovely", UnkPolicy::MapToUnk).unwrap();
        assert_eq!(ids[2], vocab.unk_id());
    }

    #[test]
    fn specials_occupy_lowest_indices() {
        let vocab = Vocabulary::from_texts(["b a <pad>"]);
        assert_eq!(&vocab.tokens()[..4], &SPECIAL_TOKENS.map(String::from));
        assert_eq!(vocab.id("<eos>"), Some(EOS));
        assert_eq!(vocab.len(), 8);
    }

    #[test]
    fn punctuation_is_stripped() {
        assert_eq!(canonicalize("  The Eiffel-Tower,  is TALL!  "), "the eiffeltower is tall");
    }
}
