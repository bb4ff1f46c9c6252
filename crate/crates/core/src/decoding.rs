//! Greedy and length-penalised beam search.
//!
//! Search runs against [`NextTokenScorer`], so the same code drives the transformer and
//! the small hand-built models used in tests. Returned sequences exclude the final EOS.

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::forward::{encode_query, next_token_logits, EncodedQuery};
use crate::model::{log_softmax_row, Parameters, Scalar};

/// Next-token log-probabilities given the tokens generated so far.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A model conditioned on one query. PAD and BOS are never generated.
pub struct TransformerScorer<'a, F: Scalar> {
    params: &'a Parameters<F>,
    encoded: EncodedQuery<F>,
}

impl<'a, F: Scalar> TransformerScorer<'a, F> {
    pub fn new(params: &'a Parameters<F>, query: &[usize]) -> Result<Self> {
        Ok(Self {
            params,
            encoded: encode_query(params, query)?,
        })
    }
}

impl<F: Scalar> NextTokenScorer for TransformerScorer<'_, F> {
    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut logits = next_token_logits(self.params, &self.encoded, prefix)?;
        logits[PAD] = f64::NEG_INFINITY;
        logits[BOS] = f64::NEG_INFINITY;
        Ok(log_softmax_row(&logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "beam" => Ok(Self::Beam),
            other => Err(Error::config(format!("unknown decoding strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// Finished hypotheses score `logp / len^exponent`; `len` counts the EOS.
    pub length_penalty: f64,
    /// Maximum number of generated tokens, EOS included.
    pub max_decode_length: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_size: 5,
            length_penalty: 1.0,
            max_decode_length: 30,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::config("length_penalty must be a non-negative number"));
        }
        if self.max_decode_length < 1 {
            return Err(Error::config("max_decode_length must be at least 1"));
        }
        Ok(())
    }
}

/// Lowest id among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(scorer: &dyn NextTokenScorer, max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let tok = argmax(&scorer.log_probs(&out)?);
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

/// Length-normalised score of a finished hypothesis.
pub fn hypothesis_score(logp: f64, len: usize, exponent: f64) -> f64 {
    logp / (len as f64).powf(exponent)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp: f64,
    /// Scored length: tokens plus EOS, or the maximum length when cut off.
    pub len: usize,
    pub score: f64,
}

/// Beam search with a finished pool.
///
/// Each step ranks all expansions of the active beam by cumulative log-probability
/// (ties: earlier hypothesis, then lower token id). EOS expansions ranked inside the top
/// `beam_size` move to the finished pool; the active beam is refilled with the best
/// non-EOS expansions. Hypotheses that reach `max_len` tokens are finished as they are.
/// The search stops once no active hypothesis can beat the best finished score.
pub fn beam_search(scorer: &dyn NextTokenScorer, beam_size: usize, exponent: f64, max_len: usize) -> Result<Option<Hypothesis>> {
    if beam_size < 1 || max_len < 1 {
        return Err(Error::config("beam_size and max_len must be at least 1"));
    }
    let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let finish = |finished: &mut Vec<Hypothesis>, tokens: Vec<usize>, logp: f64, len: usize| {
        finished.push(Hypothesis {
            score: hypothesis_score(logp, len, exponent),
            tokens,
            logp,
            len,
        });
    };
    for step in 0..max_len {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (tokens, logp)) in active.iter().enumerate() {
            let lp = scorer.log_probs(tokens)?;
            if lp.len() != scorer.vocab_size() {
                return Err(Error::shape(format!("scorer returned {} scores", lp.len())));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    expansions.push((logp + l, hi, tok));
                }
            }
        }
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        for (rank, &(logp, hi, tok)) in expansions.iter().enumerate() {
            if rank >= beam_size && next.len() == beam_size {
                break;
            }
            let prefix = &active[hi].0;
            if tok == EOS {
                if rank < beam_size {
                    finish(&mut finished, prefix.clone(), logp, prefix.len() + 1);
                }
            } else if next.len() < beam_size {
                let mut t = prefix.clone();
                t.push(tok);
                next.push((t, logp));
            }
        }
        if step + 1 == max_len {
            for (tokens, logp) in next.drain(..) {
                finish(&mut finished, tokens, logp, max_len);
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        let best = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let bound = active
            .iter()
            .map(|(_, l)| hypothesis_score(*l, max_len, exponent))
            .fold(f64::NEG_INFINITY, f64::max);
        if best >= bound {
            break;
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    Ok(best)
}

pub fn beam_decode(scorer: &dyn NextTokenScorer, config: &DecodeConfig) -> Result<Vec<usize>> {
    config.validate()?;
    Ok(beam_search(scorer, config.beam_size, config.length_penalty, config.max_decode_length)?
        .map(|h| h.tokens)
        .unwrap_or_default())
}

pub fn decode(scorer: &dyn NextTokenScorer, config: &DecodeConfig) -> Result<Vec<usize>> {
    config.validate()?;
    match config.strategy {
        Strategy::Greedy => greedy_decode(scorer, config.max_decode_length),
        Strategy::Beam => beam_decode(scorer, config),
    }
}

/// Decodes one tokenised query; the length is capped by the model's maximum sequence
/// length.
pub fn decode_query<F: Scalar>(params: &Parameters<F>, query: &[usize], config: &DecodeConfig) -> Result<Vec<usize>> {
    let scorer = TransformerScorer::new(params, query)?;
    let capped = DecodeConfig {
        max_decode_length: config.max_decode_length.min(params.config().max_sequence_length),
        ..*config
    };
    decode(&scorer, &capped)
}

/// Decodes raw query texts in order, returning detokenised responses.
pub fn decode_texts<F: Scalar>(params: &Parameters<F>, vocab: &Vocab, queries: &[String], config: &DecodeConfig) -> Result<Vec<String>> {
    if vocab.len() != params.config().vocab_size {
        return Err(Error::Architecture(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    queries
        .iter()
        .map(|q| {
            let mut ids = vocab.tokenize(q)?;
            ids.truncate(params.config().max_sequence_length);
            if ids.is_empty() {
                return Err(Error::EmptyInput(format!("query {q:?} has no tokens")));
            }
            Ok(vocab.detokenize(&decode_query(params, &ids, config)?))
        })
        .collect()
}
