use std::rc::Rc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{AttnIdx, FfIdx, NormIdx};
use super::tape::{AttnGeom, NodeId, Tape};
use super::{Gradients, Mode, Parameters, Scalar};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// `A = Q K^T / sqrt(d_k)`, unmasked.
pub fn attention_scores<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>, d_k: usize) -> Result<Array2<F>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(format!(
            "query width {} differs from key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if d_k == 0 {
        return Err(Error::config("d_k must be positive"));
    }
    Ok(q.dot(&k.t()) * F::of(1.0 / (d_k as f64).sqrt()))
}

/// `p_i = exp(z_i / t) / sum_j exp(z_j / t)`, max-shifted.
pub fn softmax_with_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if t.is_nan() || t <= 0.0 || t.is_infinite() {
        return Err(Error::config(format!("temperature {t} must be positive")));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax over no logits".into()));
    }
    Ok(softmax_t(logits.iter().copied(), t))
}

pub(crate) fn softmax_t(logits: impl Iterator<Item = f64> + Clone, t: f64) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.map(|z| ((z - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

/// A right-padded batch. Decoder inputs are `BOS r_1 .. r_n`, targets `r_1 .. r_n EOS`;
/// every position past that holds PAD and is masked.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub dec_in: Vec<usize>,
    pub targets: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(pairs: &[(&[usize], &[usize])], max_len: usize) -> Result<Self> {
        Self::with_min_lengths(pairs, 0, 0, max_len)
    }

    /// Like [`PaddedBatch::new`] but pads to at least the given lengths.
    pub fn with_min_lengths(
        pairs: &[(&[usize], &[usize])],
        min_src: usize,
        min_tgt: usize,
        max_len: usize,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        for (q, r) in pairs {
            if q.is_empty() || q.contains(&PAD) {
                return Err(Error::EmptyInput("query must be non-empty and PAD-free".into()));
            }
            if r.contains(&PAD) {
                return Err(Error::config("response must be PAD-free"));
            }
        }
        let src_len = pairs.iter().map(|(q, _)| q.len()).max().unwrap_or(0).max(min_src);
        let tgt_len = pairs.iter().map(|(_, r)| r.len() + 1).max().unwrap_or(0).max(min_tgt);
        for len in [src_len, tgt_len] {
            if len > max_len {
                return Err(Error::SequenceTooLong { len, max: max_len });
            }
        }
        let b = pairs.len();
        let mut src = vec![PAD; b * src_len];
        let mut dec_in = vec![PAD; b * tgt_len];
        let mut targets = vec![PAD; b * tgt_len];
        for (i, (q, r)) in pairs.iter().enumerate() {
            src[i * src_len..i * src_len + q.len()].copy_from_slice(q);
            dec_in[i * tgt_len] = BOS;
            dec_in[i * tgt_len + 1..i * tgt_len + 1 + r.len()].copy_from_slice(r);
            targets[i * tgt_len..i * tgt_len + r.len()].copy_from_slice(r);
            targets[i * tgt_len + r.len()] = EOS;
        }
        Ok(Self {
            batch: b,
            src_len,
            tgt_len,
            src,
            dec_in,
            targets,
        })
    }

    pub fn target_mask(&self) -> Vec<bool> {
        self.targets.iter().map(|&t| t != PAD).collect()
    }

    pub fn src_mask(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t != PAD).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Seed for dropout masks; ignored in eval mode.
    pub dropout_seed: u64,
    /// Also expose encoder-decoder attention scores in the trace.
    pub cross_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout_seed: 0,
            cross_attention: false,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout_seed,
            cross_attention: false,
        }
    }
}

/// Everything the losses look at, for a padded batch. Row `b * tgt_len + i` of `logits`
/// and of each hidden matrix belongs to target position `i` of element `b`; score rows
/// follow `(b * heads + h) * tgt_len + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub batch: usize,
    pub tgt_len: usize,
    pub src_len: usize,
    pub heads: usize,
    pub logits: Array2<F>,
    pub decoder_hidden: Vec<Array2<F>>,
    pub decoder_self_attention_scores: Vec<Array2<F>>,
    pub cross_attention_scores: Option<Vec<Array2<F>>>,
    pub targets: Vec<usize>,
    pub target_mask: Vec<bool>,
    pub src_mask: Vec<bool>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn num_layers(&self) -> usize {
        self.decoder_hidden.len()
    }

    pub fn valid_positions(&self, b: usize) -> usize {
        self.target_mask[b * self.tgt_len..(b + 1) * self.tgt_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Whether self-attention score `(i, j)` of element `b` is causally valid and non-pad.
    pub fn self_score_valid(&self, b: usize, i: usize, j: usize) -> bool {
        j <= i && self.target_mask[b * self.tgt_len + i] && self.target_mask[b * self.tgt_len + j]
    }

    pub fn cross_score_valid(&self, b: usize, i: usize, j: usize) -> bool {
        self.target_mask[b * self.tgt_len + i] && self.src_mask[b * self.src_len + j]
    }

    /// The single-element trace for batch element `b`.
    pub fn element(&self, b: usize) -> ForwardTrace<F> {
        let t = self.tgt_len;
        let rows = |m: &Array2<F>, per: usize| m.slice(ndarray::s![b * per..(b + 1) * per, ..]).to_owned();
        ForwardTrace {
            batch: 1,
            tgt_len: t,
            src_len: self.src_len,
            heads: self.heads,
            logits: rows(&self.logits, t),
            decoder_hidden: self.decoder_hidden.iter().map(|m| rows(m, t)).collect(),
            decoder_self_attention_scores: self
                .decoder_self_attention_scores
                .iter()
                .map(|m| rows(m, self.heads * t))
                .collect(),
            cross_attention_scores: self
                .cross_attention_scores
                .as_ref()
                .map(|v| v.iter().map(|m| rows(m, self.heads * t)).collect()),
            targets: self.targets[b * t..(b + 1) * t].to_vec(),
            target_mask: self.target_mask[b * t..(b + 1) * t].to_vec(),
            src_mask: self.src_mask[b * self.src_len..(b + 1) * self.src_len].to_vec(),
        }
    }
}

/// Gradient of some scalar with respect to the matrices of a [`ForwardTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGrad<F> {
    pub logits: Option<Array2<F>>,
    pub decoder_hidden: Vec<Option<Array2<F>>>,
    pub decoder_self_attention_scores: Vec<Option<Array2<F>>>,
    pub cross_attention_scores: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> TraceGrad<F> {
    pub fn empty(layers: usize) -> Self {
        Self {
            logits: None,
            decoder_hidden: vec![None; layers],
            decoder_self_attention_scores: vec![None; layers],
            cross_attention_scores: vec![None; layers],
        }
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, other: &TraceGrad<F>, w: f64) {
        fn merge<F: Scalar>(dst: &mut Option<Array2<F>>, src: &Option<Array2<F>>, w: F) {
            if let Some(s) = src {
                match dst {
                    Some(d) => d.zip_mut_with(s, |a, &b| *a = *a + w * b),
                    None => *dst = Some(s.mapv(|x| x * w)),
                }
            }
        }
        let w = F::of(w);
        merge(&mut self.logits, &other.logits, w);
        for (d, s) in self.decoder_hidden.iter_mut().zip(&other.decoder_hidden) {
            merge(d, s, w);
        }
        for (d, s) in self
            .decoder_self_attention_scores
            .iter_mut()
            .zip(&other.decoder_self_attention_scores)
        {
            merge(d, s, w);
        }
        for (d, s) in self.cross_attention_scores.iter_mut().zip(&other.cross_attention_scores) {
            merge(d, s, w);
        }
    }
}

struct TraceNodes {
    logits: NodeId,
    hidden: Vec<NodeId>,
    self_scores: Vec<NodeId>,
    cross_scores: Vec<NodeId>,
}

/// A recorded forward pass: the trace plus the tape needed to differentiate it.
pub struct ForwardPass<F: Scalar> {
    pub trace: ForwardTrace<F>,
    tape: Tape<F>,
    nodes: TraceNodes,
    shapes: Vec<(usize, usize)>,
}

impl<F: Scalar> ForwardPass<F> {
    /// Parameter gradients of the scalar whose trace gradient is `grad`.
    pub fn backward(&self, grad: &TraceGrad<F>) -> Result<Gradients<F>> {
        let mut seeds = Vec::new();
        let check = |name: &str, g: &Array2<F>, want: (usize, usize)| {
            if g.dim() != want {
                Err(Error::shape(format!("{name} gradient {:?} vs {:?}", g.dim(), want)))
            } else {
                Ok(())
            }
        };
        if let Some(g) = &grad.logits {
            check("logits", g, self.trace.logits.dim())?;
            seeds.push((self.nodes.logits, g.clone()));
        }
        let layers = self.nodes.hidden.len();
        if grad.decoder_hidden.len() > layers || grad.decoder_self_attention_scores.len() > layers {
            return Err(Error::Architecture("gradient has more layers than the trace".into()));
        }
        for (l, g) in grad.decoder_hidden.iter().enumerate() {
            if let Some(g) = g {
                check("hidden", g, self.trace.decoder_hidden[l].dim())?;
                seeds.push((self.nodes.hidden[l], g.clone()));
            }
        }
        for (l, g) in grad.decoder_self_attention_scores.iter().enumerate() {
            if let Some(g) = g {
                check("self-attention", g, self.trace.decoder_self_attention_scores[l].dim())?;
                seeds.push((self.nodes.self_scores[l], g.clone()));
            }
        }
        for (l, g) in grad.cross_attention_scores.iter().enumerate() {
            if let Some(g) = g {
                let node = *self.nodes.cross_scores.get(l).ok_or_else(|| {
                    Error::Architecture("cross-attention gradient for a missing layer".into())
                })?;
                check("cross-attention", g, self.tape.value(node).dim())?;
                seeds.push((node, g.clone()));
            }
        }
        Ok(Gradients {
            tensors: self.tape.backward(seeds, &self.shapes),
        })
    }
}

struct Builder<'a, F: Scalar> {
    tape: Tape<F>,
    params: &'a Parameters<F>,
    rng: Option<ChaCha8Rng>,
    dropout: f64,
}

impl<'a, F: Scalar> Builder<'a, F> {
    fn new(params: &'a Parameters<F>, opts: &ForwardOptions) -> Self {
        let dropout = params.config().dropout_rate;
        let rng = (opts.mode == Mode::Train && dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(opts.dropout_seed));
        Self {
            tape: Tape::new(params.tensors().len()),
            params,
            rng,
            dropout,
        }
    }

    fn p(&mut self, idx: usize) -> NodeId {
        self.tape.param(idx, &self.params.tensors()[idx])
    }

    fn drop_mask(&mut self, rows: usize, cols: usize) -> Option<Array2<F>> {
        let p = self.dropout;
        let rng = self.rng.as_mut()?;
        let keep = F::of(1.0 / (1.0 - p));
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.gen::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        }))
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.tape.value(x).dim();
        match self.drop_mask(r, c) {
            Some(m) => self.tape.dropout(x, m),
            None => x,
        }
    }

    fn linear(&mut self, x: NodeId, w: usize, b: usize) -> NodeId {
        let w = self.p(w);
        let b = self.p(b);
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: NodeId, idx: NormIdx) -> NodeId {
        let g = self.p(idx.gain);
        let b = self.p(idx.bias);
        self.tape.layer_norm(x, g, b)
    }

    fn embed(&mut self, ids: &[usize], seq_len: usize) -> NodeId {
        let d = self.params.config().d_model;
        let table = self.p(self.params.layout.embed);
        let e = self.tape.gather(table, ids.to_vec());
        let e = self.tape.scale(e, F::of((d as f64).sqrt()));
        let pe = self.tape.leaf(positional_encoding(ids.len(), seq_len, d));
        let x = self.tape.add(e, pe);
        self.dropout(x)
    }

    /// Returns the attention output and the pre-softmax score node.
    fn attention(&mut self, xq: NodeId, xkv: NodeId, idx: AttnIdx, geom: Rc<AttnGeom>) -> (NodeId, NodeId) {
        let q = self.linear(xq, idx.wq, idx.bq);
        let k = self.linear(xkv, idx.wk, idx.bk);
        let v = self.linear(xkv, idx.wv, idx.bv);
        let scores = self.tape.attn_scores(q, k, geom.clone());
        let (r, c) = self.tape.value(scores).dim();
        let drop = self.drop_mask(r, c);
        let ctx = self.tape.attn_apply(scores, v, geom, drop);
        (self.linear(ctx, idx.wo, idx.bo), scores)
    }

    fn feed_forward(&mut self, x: NodeId, idx: FfIdx) -> NodeId {
        let h = self.linear(x, idx.w1, idx.b1);
        let h = self.tape.relu(h);
        let h = self.dropout(h);
        self.linear(h, idx.w2, idx.b2)
    }

    fn residual(&mut self, x: NodeId, sub: NodeId, norm: NormIdx) -> NodeId {
        let sub = self.dropout(sub);
        let y = self.tape.add(x, sub);
        self.norm(y, norm)
    }

    fn encode(&mut self, src: &[usize], batch: usize, src_len: usize) -> NodeId {
        let cfg = self.params.config().clone();
        let geom = Rc::new(AttnGeom {
            batch,
            tq: src_len,
            tk: src_len,
            heads: cfg.num_heads,
            dk: cfg.d_k,
            causal: false,
            key_valid: src.iter().map(|&t| t != PAD).collect(),
        });
        let mut x = self.embed(src, src_len);
        for l in 0..cfg.num_encoder_layers {
            let idx = self.params.layout.encoder[l];
            let (a, _) = self.attention(x, x, idx.attn, geom.clone());
            x = self.residual(x, a, idx.ln1);
            let f = self.feed_forward(x, idx.ff);
            x = self.residual(x, f, idx.ln2);
        }
        x
    }

    fn decode(
        &mut self,
        memory: NodeId,
        src_mask: &[bool],
        dec_in: &[usize],
        batch: usize,
        src_len: usize,
        tgt_len: usize,
    ) -> TraceNodes {
        let cfg = self.params.config().clone();
        let self_geom = Rc::new(AttnGeom {
            batch,
            tq: tgt_len,
            tk: tgt_len,
            heads: cfg.num_heads,
            dk: cfg.d_k,
            causal: true,
            key_valid: dec_in.iter().map(|&t| t != PAD).collect(),
        });
        let cross_geom = Rc::new(AttnGeom {
            batch,
            tq: tgt_len,
            tk: src_len,
            heads: cfg.num_heads,
            dk: cfg.d_k,
            causal: false,
            key_valid: src_mask.to_vec(),
        });
        let mut y = self.embed(dec_in, tgt_len);
        let mut hidden = Vec::new();
        let mut self_scores = Vec::new();
        let mut cross_scores = Vec::new();
        for l in 0..cfg.num_decoder_layers {
            let idx = self.params.layout.decoder[l];
            let (a, s) = self.attention(y, y, idx.self_attn, self_geom.clone());
            y = self.residual(y, a, idx.ln1);
            let (c, cs) = self.attention(y, memory, idx.cross, cross_geom.clone());
            y = self.residual(y, c, idx.ln2);
            let f = self.feed_forward(y, idx.ff);
            y = self.residual(y, f, idx.ln3);
            hidden.push(y);
            self_scores.push(s);
            cross_scores.push(cs);
        }
        let logits = self.linear(y, self.params.layout.out_w, self.params.layout.out_b);
        TraceNodes {
            logits,
            hidden,
            self_scores,
            cross_scores,
        }
    }
}

fn positional_encoding<F: Scalar>(rows: usize, seq_len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((rows, d), |(r, c)| {
        let pos = (r % seq_len) as f64;
        let freq = (10000f64).powf((2 * (c / 2)) as f64 / d as f64);
        let a = pos / freq;
        F::of(if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Teacher-forced forward pass over a padded batch.
pub fn forward_batch<F: Scalar>(params: &Parameters<F>, batch: &PaddedBatch, opts: &ForwardOptions) -> Result<ForwardPass<F>> {
    let cfg = params.config();
    for len in [batch.src_len, batch.tgt_len] {
        if len > cfg.max_sequence_length {
            return Err(Error::SequenceTooLong {
                len,
                max: cfg.max_sequence_length,
            });
        }
    }
    if let Some(&bad) = batch.src.iter().chain(&batch.dec_in).find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::config(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let mut b = Builder::new(params, opts);
    let memory = b.encode(&batch.src, batch.batch, batch.src_len);
    let src_mask = batch.src_mask();
    let nodes = b.decode(memory, &src_mask, &batch.dec_in, batch.batch, batch.src_len, batch.tgt_len);
    let tape = b.tape;
    let trace = ForwardTrace {
        batch: batch.batch,
        tgt_len: batch.tgt_len,
        src_len: batch.src_len,
        heads: cfg.num_heads,
        logits: tape.value(nodes.logits).clone(),
        decoder_hidden: nodes.hidden.iter().map(|&n| tape.value(n).clone()).collect(),
        decoder_self_attention_scores: nodes.self_scores.iter().map(|&n| tape.value(n).clone()).collect(),
        cross_attention_scores: opts
            .cross_attention
            .then(|| nodes.cross_scores.iter().map(|&n| tape.value(n).clone()).collect()),
        targets: batch.targets.clone(),
        target_mask: batch.target_mask(),
        src_mask,
    };
    Ok(ForwardPass {
        trace,
        tape,
        nodes,
        shapes: params.tensors().iter().map(|t| t.dim()).collect(),
    })
}

/// Teacher-forced forward pass for one (query, response) pair.
pub fn forward<F: Scalar>(params: &Parameters<F>, query: &[usize], response: &[usize], opts: &ForwardOptions) -> Result<ForwardPass<F>> {
    let batch = PaddedBatch::new(&[(query, response)], params.config().max_sequence_length)?;
    forward_batch(params, &batch, opts)
}

/// Encoder output for one query, reused across decoding steps.
pub(crate) struct EncodedQuery<F> {
    pub memory: Array2<F>,
    pub src_mask: Vec<bool>,
}

pub(crate) fn encode_query<F: Scalar>(params: &Parameters<F>, query: &[usize]) -> Result<EncodedQuery<F>> {
    let cfg = params.config();
    if query.is_empty() {
        return Err(Error::EmptyInput("empty query".into()));
    }
    if query.len() > cfg.max_sequence_length {
        return Err(Error::SequenceTooLong {
            len: query.len(),
            max: cfg.max_sequence_length,
        });
    }
    let mut b = Builder::new(params, &ForwardOptions::eval());
    let memory = b.encode(query, 1, query.len());
    Ok(EncodedQuery {
        memory: b.tape.value(memory).clone(),
        src_mask: query.iter().map(|&t| t != PAD).collect(),
    })
}

/// Logits for the position after `BOS prefix`.
pub(crate) fn next_token_logits<F: Scalar>(params: &Parameters<F>, enc: &EncodedQuery<F>, prefix: &[usize]) -> Result<Vec<f64>> {
    let cfg = params.config();
    let mut dec_in = Vec::with_capacity(prefix.len() + 1);
    dec_in.push(BOS);
    dec_in.extend_from_slice(prefix);
    if dec_in.len() > cfg.max_sequence_length {
        return Err(Error::SequenceTooLong {
            len: dec_in.len(),
            max: cfg.max_sequence_length,
        });
    }
    let mut b = Builder::new(params, &ForwardOptions::eval());
    let memory = b.tape.leaf(enc.memory.clone());
    let t = dec_in.len();
    let nodes = b.decode(memory, &enc.src_mask, &dec_in, 1, enc.src_mask.len(), t);
    let logits = b.tape.value(nodes.logits);
    Ok(logits.row(t - 1).iter().map(|x| x.as_f64()).collect())
}
