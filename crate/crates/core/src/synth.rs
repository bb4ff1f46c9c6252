//! Deterministic many-to-one dialogue corpus.
//!
//! Queries are distinct sequences of pseudo-words. A `generic_ratio` share of pairs gets
//! one of a few fixed generic replies (all starting with "i"), spread evenly over the
//! templates so each has multi-query support. Every other pair gets a query-specific
//! reply: the query translated word by word through a fixed lexicon, which makes these
//! replies unique and learnable.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RawPair;
use crate::error::{Error, Result};

pub const GENERIC_TEMPLATES: [&str; 6] = [
    "i don't know .",
    "i am not sure .",
    "i have no idea .",
    "i can't say .",
    "i do not know what you mean .",
    "i have no clue .",
];

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub templates: usize,
    /// Training pairs (one per distinct query).
    pub queries: usize,
    pub generic_ratio: f64,
    pub seed: u64,
    pub valid_queries: usize,
    pub test_queries: usize,
    /// Size of the query-word inventory (and of the reply lexicon).
    pub lexicon_size: usize,
    pub min_query_len: usize,
    pub max_query_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            templates: 3,
            queries: 2000,
            generic_ratio: 0.5,
            seed: 0,
            valid_queries: 200,
            test_queries: 200,
            lexicon_size: 60,
            min_query_len: 3,
            max_query_len: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<RawPair>,
    pub valid: Vec<RawPair>,
    pub test: Vec<RawPair>,
    pub templates: Vec<String>,
}

impl SynthCorpus {
    pub fn is_template(&self, response: &str) -> bool {
        let r = crate::corpus::normalize_text(response);
        self.templates.contains(&r)
    }
}

/// Query words are two or three consonant-vowel syllables; reply words append `x`.
fn query_word(i: usize) -> String {
    let (a, rest) = (i % 60, i / 60);
    let (b, c) = (rest % 60, rest / 60);
    let syl = |k: usize| format!("{}{}", ONSETS[k / 5], VOWELS[k % 5]);
    if c == 0 {
        format!("{}{}", syl(a), syl(b))
    } else {
        format!("{}{}{}", syl(a), syl(b), syl(c % 60))
    }
}

fn reply_word(i: usize) -> String {
    format!("{}{}", query_word(i), "x")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if !(cfg.generic_ratio > 0.0 && cfg.generic_ratio < 1.0) {
        return Err(Error::config(format!("generic ratio {} must lie in (0, 1)", cfg.generic_ratio)));
    }
    if cfg.templates == 0 || cfg.templates > GENERIC_TEMPLATES.len() {
        return Err(Error::config(format!(
            "template count must lie in 1..={}",
            GENERIC_TEMPLATES.len()
        )));
    }
    if cfg.lexicon_size < 2 || cfg.min_query_len == 0 || cfg.min_query_len > cfg.max_query_len {
        return Err(Error::config("lexicon size and query lengths are inconsistent"));
    }
    let split_generic = |n: usize| (cfg.generic_ratio * n as f64).round() as usize;
    let n_generic = split_generic(cfg.queries);
    if n_generic < 2 * cfg.templates {
        return Err(Error::config(format!(
            "{n_generic} generic pairs cannot give each of {} templates two queries",
            cfg.templates
        )));
    }
    if n_generic == cfg.queries {
        return Err(Error::config("generic ratio leaves no query-specific pairs"));
    }
    let total = cfg.queries + cfg.valid_queries + cfg.test_queries;
    let space: f64 = (cfg.min_query_len..=cfg.max_query_len)
        .map(|l| (cfg.lexicon_size as f64).powi(l as i32))
        .sum();
    if (total as f64) > space / 2.0 {
        return Err(Error::config(format!(
            "{total} distinct queries requested from a space of {space}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lexicon: Vec<usize> = (0..cfg.lexicon_size).collect();
    lexicon.shuffle(&mut rng);

    let mut seen = HashSet::new();
    let mut queries = Vec::with_capacity(total);
    while queries.len() < total {
        let len = rng.gen_range(cfg.min_query_len..=cfg.max_query_len);
        let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.lexicon_size)).collect();
        if seen.insert(words.clone()) {
            queries.push(words);
        }
    }
    let templates: Vec<String> = GENERIC_TEMPLATES[..cfg.templates].iter().map(|t| t.to_string()).collect();

    let build = |qs: &[Vec<usize>], rng: &mut ChaCha8Rng| -> Vec<RawPair> {
        let mut order: Vec<usize> = (0..qs.len()).collect();
        order.shuffle(rng);
        let mut generic = vec![None; qs.len()];
        for (k, &i) in order.iter().take(split_generic(qs.len())).enumerate() {
            generic[i] = Some(k % templates.len());
        }
        qs.iter()
            .zip(generic)
            .map(|(q, g)| {
                let query = q.iter().map(|&w| query_word(w)).collect::<Vec<_>>().join(" ");
                let response = match g {
                    Some(t) => templates[t].clone(),
                    None => q.iter().map(|&w| reply_word(lexicon[w])).collect::<Vec<_>>().join(" "),
                };
                RawPair::new(query, response)
            })
            .collect()
    };
    let (train_q, rest) = queries.split_at(cfg.queries);
    let (valid_q, test_q) = rest.split_at(cfg.valid_queries);
    let train = build(train_q, &mut rng);
    let valid = build(valid_q, &mut rng);
    let test = build(test_q, &mut rng);
    Ok(SynthCorpus {
        train,
        valid,
        test,
        templates,
    })
}
