//! Automatic evaluation: Dist-n, low-frequency token ratio, n-gram KL divergence and
//! smoothed sentence BLEU.
//!
//! All functions take tokenised responses. A metric that is undefined on its input (no
//! n-grams, no tokens) returns [`Error::UndefinedMean`] and is reported as absent.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, UNK};
use crate::error::{Error, Result};

/// Smoothing added to every n-gram count of the union support before normalising.
pub const KL_EPSILON: f64 = 1e-9;

/// Identifier of the BLEU smoothing variant, embedded in reports.
pub const BLEU_VARIANT: &str = "add-one-orders-2-and-up";

/// Default low-frequency threshold.
pub const LF_THRESHOLD: u64 = 100;

fn ngram_counts<T: Hash + Eq + Clone>(responses: &[Vec<T>], n: usize) -> HashMap<Vec<T>, u64> {
    let mut counts = HashMap::new();
    for r in responses {
        if r.len() >= n {
            for w in r.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::config("n-gram order must be at least 1"))
    } else {
        Ok(())
    }
}

/// Distinct n-grams over total n-gram occurrences, pooled over the whole response set.
pub fn dist_n<T: Hash + Eq + Clone>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    check_order(n)?;
    let counts = ngram_counts(responses, n);
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::UndefinedMean(format!("no {n}-grams in the response set")));
    }
    Ok(counts.len() as f64 / total as f64)
}

/// Share of generated token occurrences whose training frequency is below `threshold`.
/// Tokens outside the vocabulary map to UNK, which counts as high-frequency.
pub fn lf_ratio<S: AsRef<str>>(responses: &[Vec<S>], vocab: &Vocab, threshold: u64) -> Result<f64> {
    let mut total = 0u64;
    let mut rare = 0u64;
    for tok in responses.iter().flatten() {
        total += 1;
        match vocab.id(tok.as_ref()) {
            Some(id) if id != UNK && vocab.frequency(id) < threshold => rare += 1,
            _ => {}
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMean("no generated tokens".into()));
    }
    Ok(rare as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlDirection {
    /// `KL(P_ref || P_gen)`.
    #[serde(rename = "ref||gen")]
    RefGen,
    /// `KL(P_gen || P_ref)`.
    #[serde(rename = "gen||ref")]
    GenRef,
}

impl std::str::FromStr for KlDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ref||gen" | "ref-gen" => Ok(Self::RefGen),
            "gen||ref" | "gen-ref" => Ok(Self::GenRef),
            other => Err(Error::config(format!("unknown KL direction {other:?}"))),
        }
    }
}

/// KL divergence between n-gram distributions (natural log), each smoothed by adding
/// [`KL_EPSILON`] to every count of the union support.
pub fn kl_n<T: Hash + Eq + Clone>(generated: &[Vec<T>], references: &[Vec<T>], n: usize, direction: KlDirection) -> Result<f64> {
    check_order(n)?;
    if generated.is_empty() || references.is_empty() {
        return Err(Error::EmptyInput("KL needs non-empty corpora".into()));
    }
    let gen = ngram_counts(generated, n);
    let refs = ngram_counts(references, n);
    let mut support: Vec<&Vec<T>> = refs.keys().collect();
    support.extend(gen.keys().filter(|g| !refs.contains_key(*g)));
    if support.is_empty() {
        return Err(Error::UndefinedMean(format!("no {n}-grams in either corpus")));
    }
    let u = support.len() as f64;
    let zg = gen.values().sum::<u64>() as f64 + KL_EPSILON * u;
    let zr = refs.values().sum::<u64>() as f64 + KL_EPSILON * u;
    let mut kl = 0.0;
    for g in support {
        let pg = (gen.get(g).copied().unwrap_or(0) as f64 + KL_EPSILON) / zg;
        let pr = (refs.get(g).copied().unwrap_or(0) as f64 + KL_EPSILON) / zr;
        let (p, q) = match direction {
            KlDirection::RefGen => (pr, pg),
            KlDirection::GenRef => (pg, pr),
        };
        kl += p * (p / q).ln();
    }
    Ok(kl.max(0.0))
}

/// Sentence BLEU-n with unsmoothed unigram precision, add-one smoothed precisions for
/// orders 2..=n and the brevity penalty. An empty hypothesis scores 0.
pub fn sentence_bleu<T: Hash + Eq + Clone>(hypothesis: &[T], reference: &[T], n: usize) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let hyp = ngram_counts(std::slice::from_ref(&hypothesis.to_vec()), k);
        let refc = ngram_counts(std::slice::from_ref(&reference.to_vec()), k);
        let total: u64 = hyp.values().sum();
        let matched: u64 = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if k == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Mean sentence BLEU-n over aligned hypothesis/reference pairs.
pub fn bleu_n<T: Hash + Eq + Clone>(generated: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    check_order(n)?;
    if generated.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} hypotheses for {} references",
            generated.len(),
            references.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::UndefinedMean("BLEU over zero sentences".into()));
    }
    let total: f64 = generated.iter().zip(references).map(|(h, r)| sentence_bleu(h, r, n)).sum();
    Ok(total / generated.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub kl_direction: KlDirection,
    pub lf_threshold: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            kl_direction: KlDirection::RefGen,
            lf_threshold: LF_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsCounts {
    pub responses: usize,
    pub total_tokens: usize,
    /// Total generated n-gram occurrences for n = 1, 2, 3.
    pub total_ngrams: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSettings {
    pub kl_direction: KlDirection,
    pub kl_epsilon: f64,
    pub bleu_variant: &'static str,
    pub lf_threshold: u64,
    /// Decoding knobs of the run that produced the hypotheses, when known.
    pub decoding: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dist_1: Option<f64>,
    pub dist_2: Option<f64>,
    pub dist_3: Option<f64>,
    pub lf: Option<f64>,
    pub kl_1: Option<f64>,
    pub kl_2: Option<f64>,
    pub bleu_3: Option<f64>,
    pub bleu_4: Option<f64>,
    pub counts: MetricsCounts,
    pub settings: ReportSettings,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMean(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricsReport {
    /// The full suite. LF is absent without a vocabulary.
    pub fn compute(
        generated: &[Vec<String>],
        references: &[Vec<String>],
        vocab: Option<&Vocab>,
        config: &MetricsConfig,
        decoding: Option<String>,
    ) -> Result<Self> {
        if generated.len() != references.len() {
            return Err(Error::Alignment(format!(
                "{} hypotheses for {} references",
                generated.len(),
                references.len()
            )));
        }
        if generated.is_empty() {
            return Err(Error::EmptyInput("no responses to evaluate".into()));
        }
        let ngrams = |n: usize| generated.iter().map(|r| r.len().saturating_sub(n - 1)).sum();
        Ok(Self {
            dist_1: defined(dist_n(generated, 1))?,
            dist_2: defined(dist_n(generated, 2))?,
            dist_3: defined(dist_n(generated, 3))?,
            lf: match vocab {
                Some(v) => defined(lf_ratio(generated, v, config.lf_threshold))?,
                None => None,
            },
            kl_1: defined(kl_n(generated, references, 1, config.kl_direction))?,
            kl_2: defined(kl_n(generated, references, 2, config.kl_direction))?,
            bleu_3: defined(bleu_n(generated, references, 3))?,
            bleu_4: defined(bleu_n(generated, references, 4))?,
            counts: MetricsCounts {
                responses: generated.len(),
                total_tokens: generated.iter().map(Vec::len).sum(),
                total_ngrams: [ngrams(1), ngrams(2), ngrams(3)],
            },
            settings: ReportSettings {
                kl_direction: config.kl_direction,
                kl_epsilon: KL_EPSILON,
                bleu_variant: BLEU_VARIANT,
                lf_threshold: config.lf_threshold,
                decoding,
            },
        })
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let rows = [
            ("Dist-1", fmt(self.dist_1)),
            ("Dist-2", fmt(self.dist_2)),
            ("Dist-3", fmt(self.dist_3)),
            ("LF", fmt(self.lf)),
            ("KL-1", fmt(self.kl_1)),
            ("KL-2", fmt(self.kl_2)),
            ("BLEU-3", fmt(self.bleu_3)),
            ("BLEU-4", fmt(self.bleu_4)),
            ("responses", self.counts.responses.to_string()),
            ("tokens", self.counts.total_tokens.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k:<10} {v:>10}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn dist_hand_values() {
        assert!((dist_n(&[toks("a b a")], 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dist_n(&[toks("a b a")], 2).unwrap(), 1.0);
        let same = vec![toks("a b"); 10];
        assert_eq!(dist_n(&same, 1).unwrap(), 0.1);
        assert!(matches!(dist_n(&[toks("a")], 2), Err(Error::UndefinedMean(_))));
    }

    #[test]
    fn kl_hand_value() {
        let refs = vec![toks("a a a b")];
        let gen = vec![toks("a b")];
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_n(&gen, &refs, 1, KlDirection::RefGen).unwrap() - expected).abs() < 1e-8);
        assert!(kl_n(&refs, &refs, 2, KlDirection::RefGen).unwrap() <= 1e-9);
        let disjoint = kl_n(&[toks("x y")], &[toks("a b")], 1, KlDirection::RefGen).unwrap();
        assert!(disjoint.is_finite() && disjoint > 10.0);
    }

    #[test]
    fn bleu_hand_values() {
        let r = toks("a b c d");
        assert!((sentence_bleu(&toks("a b c"), &r, 3) - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert_eq!(sentence_bleu(&r, &r, 4), 1.0);
        assert_eq!(sentence_bleu(&toks("x y z"), &r, 4), 0.0);
        assert_eq!(sentence_bleu(&[], &r, 4), 0.0);
    }

    #[test]
    fn report_marks_undefined_metrics_absent() {
        let gen = vec![toks("a")];
        let report = MetricsReport::compute(&gen, &gen, None, &MetricsConfig::default(), None).unwrap();
        assert_eq!(report.dist_1, Some(1.0));
        assert_eq!(report.dist_2, None);
        assert_eq!(report.lf, None);
        assert!(report.to_table().contains("Dist-2            n/a"));
    }
}
