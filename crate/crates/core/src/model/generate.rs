use super::params::Parameters;
use super::transformer::last_logits;
use crate::corpus::{TokenId, EOS};
use crate::error::{Error, Result};
use crate::prompting::{ScoreMatrix, SegmentedPrompt};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Emitted tokens, excluding the terminating EOS.
    pub tokens: Vec<TokenId>,
    pub stopped_on_eos: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Each new position is appended to `S` with score 1 and
/// decoding stops at EOS, after `max_new_tokens`, or at the context limit.
pub fn generate(params: &Parameters, prompt: &SegmentedPrompt, s: &ScoreMatrix, max_new_tokens: usize) -> Result<Generation> {
    if prompt.answer_segment().is_some() {
        return Err(Error::param("prompt", "generation prompt must not contain an answer segment"));
    }
    let mut tokens = prompt.tokens.clone();
    let mut s = s.clone();
    let mut out = Vec::new();
    let limit = params.config.max_context;
    for _ in 0..max_new_tokens {
        let logits = last_logits(params, &tokens, &s)?;
        let next = argmax(&logits) as TokenId;
        if next == EOS {
            return Ok(Generation {
                tokens: out,
                stopped_on_eos: true,
            });
        }
        out.push(next);
        if tokens.len() == limit {
            break;
        }
        tokens.push(next);
        s = s.extended();
    }
    Ok(Generation {
        tokens: out,
        stopped_on_eos: false,
    })
}
