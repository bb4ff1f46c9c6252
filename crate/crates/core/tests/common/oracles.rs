//! Slow, direct re-implementations used as references. Nothing here shares code with the
//! library beyond the public types needed to call it.

use negdistill_core::corpus::{normalize_text, RawPair, EOS};
use negdistill_core::decoding::NextTokenScorer;
use negdistill_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Entropy of each pair's response by scanning the whole corpus per pair.
pub fn entropy_per_pair(pairs: &[RawPair]) -> Vec<f64> {
    pairs
        .iter()
        .map(|p| {
            let r = normalize_text(&p.response);
            let mut queries: Vec<String> = Vec::new();
            let mut counts: Vec<f64> = Vec::new();
            for other in pairs {
                if normalize_text(&other.response) != r {
                    continue;
                }
                let q = normalize_text(&other.query);
                match queries.iter().position(|x| *x == q) {
                    Some(i) => counts[i] += 1.0,
                    None => {
                        queries.push(q);
                        counts.push(1.0);
                    }
                }
            }
            if counts.len() == 1 {
                return 0.0;
            }
            let n: f64 = counts.iter().sum();
            counts.iter().map(|c| -(c / n) * (c / n).ln()).sum::<f64>()
        })
        .collect()
}

fn all_ngrams(responses: &[Vec<String>], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for r in responses {
        let mut i = 0;
        while i + n <= r.len() {
            out.push(r[i..i + n].to_vec());
            i += 1;
        }
    }
    out
}

fn distinct(grams: &[Vec<String>]) -> Vec<(Vec<String>, usize)> {
    let mut out: Vec<(Vec<String>, usize)> = Vec::new();
    for g in grams {
        let mut found = false;
        for (h, c) in out.iter_mut() {
            if h == g {
                *c += 1;
                found = true;
                break;
            }
        }
        if !found {
            out.push((g.clone(), 1));
        }
    }
    out
}

pub fn dist(responses: &[Vec<String>], n: usize) -> Option<f64> {
    let grams = all_ngrams(responses, n);
    if grams.is_empty() {
        return None;
    }
    Some(distinct(&grams).len() as f64 / grams.len() as f64)
}

/// `frequency(token)` returns `None` for tokens the vocabulary maps to UNK.
pub fn lf(responses: &[Vec<String>], frequency: impl Fn(&str) -> Option<u64>, threshold: u64) -> Option<f64> {
    let mut total = 0usize;
    let mut rare = 0usize;
    for r in responses {
        for t in r {
            total += 1;
            if let Some(f) = frequency(t) {
                if f < threshold {
                    rare += 1;
                }
            }
        }
    }
    (total > 0).then(|| rare as f64 / total as f64)
}

/// `KL(P_ref || P_gen)` with add-`eps` smoothing over the union support.
pub fn kl(generated: &[Vec<String>], references: &[Vec<String>], n: usize, eps: f64) -> f64 {
    let g = distinct(&all_ngrams(generated, n));
    let r = distinct(&all_ngrams(references, n));
    let mut support: Vec<Vec<String>> = r.iter().map(|(x, _)| x.clone()).collect();
    for (x, _) in &g {
        if !support.contains(x) {
            support.push(x.clone());
        }
    }
    let count = |table: &[(Vec<String>, usize)], x: &Vec<String>| {
        table.iter().find(|(y, _)| y == x).map_or(0, |(_, c)| *c) as f64
    };
    let u = support.len() as f64;
    let ng: f64 = g.iter().map(|(_, c)| *c as f64).sum();
    let nr: f64 = r.iter().map(|(_, c)| *c as f64).sum();
    let mut total = 0.0;
    for x in &support {
        let p = (count(&r, x) + eps) / (nr + eps * u);
        let q = (count(&g, x) + eps) / (ng + eps * u);
        total += p * (p / q).ln();
    }
    total
}

/// Sentence BLEU-n: clipped precisions, add-one for orders >= 2, brevity penalty.
pub fn sentence_bleu(hyp: &[String], reference: &[String], n: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut product = 1.0f64;
    for k in 1..=n {
        let hg = distinct(&all_ngrams(&[hyp.to_vec()], k));
        let rg = distinct(&all_ngrams(&[reference.to_vec()], k));
        let mut matched = 0usize;
        let mut total = 0usize;
        for (g, c) in &hg {
            total += c;
            let rc = rg.iter().find(|(x, _)| x == g).map_or(0, |(_, c)| *c);
            matched += (*c).min(rc);
        }
        let p = if k == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        product *= p;
    }
    if product == 0.0 {
        return 0.0;
    }
    let c = hyp.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * product.powf(1.0 / n as f64)
}

pub fn bleu(generated: &[Vec<String>], references: &[Vec<String>], n: usize) -> f64 {
    let s: f64 = generated.iter().zip(references).map(|(h, r)| sentence_bleu(h, r, n)).sum();
    s / generated.len() as f64
}

/// A scorer whose next-token distribution is a fixed pseudo-random function of the
/// prefix.
pub struct ToyModel {
    pub vocab: usize,
    pub seed: u64,
    /// Larger values give peakier distributions.
    pub sharpness: f64,
}

impl NextTokenScorer for ToyModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut key = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for &t in prefix {
            key = key.wrapping_mul(31).wrapping_add(t as u64 + 1);
        }
        key = key.wrapping_add(prefix.len() as u64 * 7919);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let z: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-1.0..1.0) * self.sharpness).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        Ok(z.iter().map(|x| x - lse).collect())
    }
}

/// Every complete output: sequences ended by EOS before `max_len`, and EOS-free
/// sequences of exactly `max_len` tokens. Scores use `logp / len^exponent` with `len`
/// counting the EOS.
pub fn enumerate(model: &dyn NextTokenScorer, max_len: usize, exponent: f64) -> Vec<(Vec<usize>, f64, f64)> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, logp)) = stack.pop() {
        let lp = model.log_probs(&prefix).unwrap();
        for (tok, l) in lp.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let total = logp + l;
            if tok == EOS {
                let len = prefix.len() + 1;
                out.push((prefix.clone(), total, total / (len as f64).powf(exponent)));
            } else {
                let mut next = prefix.clone();
                next.push(tok);
                if next.len() == max_len {
                    out.push((next, total, total / (max_len as f64).powf(exponent)));
                } else {
                    stack.push((next, total));
                }
            }
        }
    }
    out
}

/// The best-scoring complete output and the runner-up score.
pub fn exhaustive_best(model: &dyn NextTokenScorer, max_len: usize, exponent: f64) -> (Vec<usize>, f64, f64) {
    let all = enumerate(model, max_len, exponent);
    let mut best = 0;
    for i in 1..all.len() {
        if all[i].2 > all[best].2 {
            best = i;
        }
    }
    let runner_up = all
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, h)| h.2)
        .fold(f64::NEG_INFINITY, f64::max);
    (all[best].0.clone(), all[best].2, runner_up)
}
