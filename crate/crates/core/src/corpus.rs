//! Dialogue pairs, vocabulary, source entropy and the entropy-ranked split.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Canonical string form used to decide whether two utterances are the same.
pub fn normalize_text(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

/// Text view of a (query, response) pair.
pub trait PairText {
    fn query_text(&self) -> &str;
    fn response_text(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub query: String,
    pub response: String,
}

impl RawPair {
    pub fn new(query: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            response: response.into(),
        }
    }
}

impl PairText for RawPair {
    fn query_text(&self) -> &str {
        &self.query
    }
    fn response_text(&self) -> &str {
        &self.response
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    freq: Vec<u64>,
}

impl Vocab {
    /// Keeps the `max_size - 4` most frequent tokens of the given pairs (queries and
    /// responses), ties broken by first occurrence. `max_size` counts the reserved ids.
    pub fn build<P: PairText>(pairs: &[P], max_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("cannot build a vocabulary from no pairs".into()));
        }
        if max_size < RESERVED.len() {
            return Err(Error::config(format!(
                "vocabulary size {max_size} is smaller than the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
        let mut order = 0usize;
        for pair in pairs {
            for text in [pair.query_text(), pair.response_text()] {
                for tok in normalize_tokens(text) {
                    let entry = counts.entry(tok).or_insert_with(|| {
                        order += 1;
                        (0, order)
                    });
                    entry.0 += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0u64; RESERVED.len()];
        for (t, c, _) in ranked {
            tokens.push(t);
            freq.push(c);
        }
        Ok(Self::from_parts(tokens, freq))
    }

    fn from_parts(tokens: Vec<String>, freq: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index, freq }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Training-split count of a token; zero for reserved ids.
    pub fn frequency(&self, id: usize) -> u64 {
        self.freq.get(id).copied().unwrap_or(0)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, self)
    }

    /// Joins ids back to text, dropping PAD/BOS/EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One `token \t frequency` line per id, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (t, f) in self.tokens.iter().zip(&self.freq) {
            writeln!(w, "{t}\t{f}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut fields = line.split('\t');
            let (Some(tok), Some(f), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err("expected `token<TAB>frequency`"));
            };
            let f: u64 = f.parse().map_err(|_| parse_err("frequency is not an integer"))?;
            tokens.push(tok.to_string());
            freq.push(f);
        }
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "vocabulary must start with the reserved tokens".into(),
            });
        }
        Ok(Self::from_parts(tokens, freq))
    }
}

/// Lowercase whitespace tokenisation; unknown tokens map to [`UNK`].
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let toks = normalize_tokens(text);
    if toks.is_empty() {
        return Err(Error::EmptyInput(format!("text {text:?} has no tokens")));
    }
    Ok(toks.iter().map(|t| vocab.id(t).unwrap_or(UNK)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialoguePair {
    pub query: Vec<usize>,
    pub response: Vec<usize>,
    pub raw_query: String,
    pub raw_response: String,
}

impl DialoguePair {
    pub fn from_raw(raw: &RawPair, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            query: tokenize(&raw.query, vocab)?,
            response: tokenize(&raw.response, vocab)?,
            raw_query: raw.query.clone(),
            raw_response: raw.response.clone(),
        })
    }
}

impl PairText for DialoguePair {
    fn query_text(&self) -> &str {
        &self.raw_query
    }
    fn response_text(&self) -> &str {
        &self.raw_response
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<DialoguePair>,
    pub split: Split,
    /// Source entropy of each pair's response, when annotated.
    pub entropy: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(pairs: Vec<DialoguePair>, split: Split) -> Self {
        Self {
            pairs,
            split,
            entropy: None,
        }
    }

    pub fn from_raw(raw: &[RawPair], vocab: &Vocab, split: Split) -> Result<Self> {
        let pairs = raw
            .iter()
            .map(|p| DialoguePair::from_raw(p, vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(pairs, split))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn raw_pairs(&self) -> Vec<RawPair> {
        self.pairs
            .iter()
            .map(|p| RawPair::new(p.raw_query.clone(), p.raw_response.clone()))
            .collect()
    }

    /// Attaches the entropy of each pair's response from `table`.
    pub fn annotate(&mut self, table: &EntropyTable) -> Result<()> {
        let values = self
            .pairs
            .iter()
            .map(|p| table.entropy_of(&p.raw_response))
            .collect::<Result<Vec<_>>>()?;
        self.entropy = Some(values);
        Ok(())
    }

    /// Negative (top-entropy) and remaining subsets, both keeping this dataset's split tag.
    pub fn rank_and_split(&self, table: &EntropyTable, ratio: f64) -> Result<(Dataset, Dataset)> {
        let (neg_idx, rest_idx) = rank_and_split_indices(&self.pairs, table, ratio)?;
        let take = |idx: &[usize]| {
            let mut d = Dataset::new(idx.iter().map(|&i| self.pairs[i].clone()).collect(), self.split);
            if let Some(e) = &self.entropy {
                d.entropy = Some(idx.iter().map(|&i| e[i]).collect());
            }
            d
        };
        Ok((take(&neg_idx), take(&rest_idx)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseStats {
    pub response: String,
    pub entropy: f64,
    /// Distinct normalised queries with their pair counts, in first-seen order.
    pub queries: Vec<(String, u64)>,
}

impl ResponseStats {
    pub fn total(&self) -> u64 {
        self.queries.iter().map(|(_, c)| c).sum()
    }
}

/// Source entropy of every distinct normalised response.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntropyTable {
    entries: Vec<ResponseStats>,
    index: HashMap<String, usize>,
}

impl EntropyTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, response: &str) -> Option<&ResponseStats> {
        self.index
            .get(&normalize_text(response))
            .map(|&i| &self.entries[i])
    }

    pub fn entropy_of(&self, response: &str) -> Result<f64> {
        self.get(response).map(|s| s.entropy).ok_or_else(|| {
            Error::config(format!("response {response:?} is missing from the entropy table"))
        })
    }

    /// Entries in first-seen order.
    pub fn entries(&self) -> &[ResponseStats] {
        &self.entries
    }

    /// `response \t entropy \t distinct_query_count`, highest entropy first.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut order: Vec<&ResponseStats> = self.entries.iter().collect();
        order.sort_by(|a, b| b.entropy.total_cmp(&a.entropy));
        let mut w = BufWriter::new(fs::File::create(path)?);
        for s in order {
            writeln!(w, "{}\t{}\t{}", s.response, s.entropy, s.queries.len())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `H(r) = -sum_i p(q_i|r) ln p(q_i|r)` with `p(q_i|r) = count(q_i, r) / count(r)`,
/// every occurrence counted, utterances compared after normalisation.
pub fn source_entropy<P: PairText>(pairs: &[P]) -> EntropyTable {
    let mut table = EntropyTable::default();
    let mut query_slots: Vec<HashMap<String, usize>> = Vec::new();
    for pair in pairs {
        let r = normalize_text(pair.response_text());
        let q = normalize_text(pair.query_text());
        let idx = *table.index.entry(r.clone()).or_insert_with(|| {
            table.entries.push(ResponseStats {
                response: r,
                entropy: 0.0,
                queries: Vec::new(),
            });
            query_slots.push(HashMap::new());
            table.entries.len() - 1
        });
        let stats = &mut table.entries[idx];
        match query_slots[idx].get(&q) {
            Some(&slot) => stats.queries[slot].1 += 1,
            None => {
                query_slots[idx].insert(q.clone(), stats.queries.len());
                stats.queries.push((q, 1));
            }
        }
    }
    for stats in &mut table.entries {
        stats.entropy = entropy_of_counts(stats.queries.iter().map(|(_, c)| *c));
    }
    table
}

fn entropy_of_counts(counts: impl Iterator<Item = u64> + Clone) -> f64 {
    let total: u64 = counts.clone().sum();
    let distinct = counts.clone().count();
    if distinct <= 1 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Stable descending sort of pairs by response entropy; the first `ceil(ratio * n)`
/// indices form the negative set. Both index lists come back in original order.
pub fn rank_and_split_indices<P: PairText>(
    pairs: &[P],
    table: &EntropyTable,
    ratio: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let entropies = pairs
        .iter()
        .map(|p| table.entropy_of(p.response_text()))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]));
    // the small offset keeps products like 0.1 * 30 from rounding up to an extra pair
    let k = ((ratio * pairs.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut negative = order[..k.min(pairs.len())].to_vec();
    let mut remaining = order[k.min(pairs.len())..].to_vec();
    negative.sort_unstable();
    remaining.sort_unstable();
    Ok((negative, remaining))
}

/// Generic form of [`Dataset::rank_and_split`] for any pair type.
pub fn rank_and_split<P: PairText + Clone>(
    pairs: &[P],
    table: &EntropyTable,
    ratio: f64,
) -> Result<(Vec<P>, Vec<P>)> {
    let (neg, rest) = rank_and_split_indices(pairs, table, ratio)?;
    Ok((
        neg.iter().map(|&i| pairs[i].clone()).collect(),
        rest.iter().map(|&i| pairs[i].clone()).collect(),
    ))
}

/// Reads `query \t response` lines. Lines without exactly two fields, or with a field
/// that is empty after normalisation, are rejected with their line number.
pub fn read_tsv(path: &Path) -> Result<Vec<RawPair>> {
    let text = fs::read_to_string(path)?;
    parse_tsv(&text, path)
}

pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<RawPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if fields.len() != 2 {
            return Err(err(format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        if normalize_tokens(fields[0]).is_empty() || normalize_tokens(fields[1]).is_empty() {
            return Err(err("empty query or response".into()));
        }
        pairs.push(RawPair::new(fields[0], fields[1]));
    }
    Ok(pairs)
}

pub fn write_tsv<P: PairText>(path: &Path, pairs: &[P]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(w, "{}\t{}", p.query_text(), p.response_text())?;
    }
    w.flush()?;
    Ok(())
}
