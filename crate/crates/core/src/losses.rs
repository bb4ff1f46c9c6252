//! Training objectives over forward traces.
//!
//! Every loss returns its value together with the gradient with respect to the
//! *student* trace; [`ForwardPass::backward`](crate::model::ForwardPass::backward) turns
//! that into parameter gradients. Teacher traces never receive gradients.
//!
//! Batch reduction everywhere: mean over the valid elements of each batch element, then
//! mean over the batch elements that have any valid element.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Scalar, TraceGrad};

/// Probabilities inside `log(1 - p)` are clamped to at most `1 - CLAMP_EPS`.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub value: f64,
    pub grad: TraceGrad<F>,
}

/// Per-row log-softmax of `logits / t`, computed in f64.
fn log_softmax_rows<F: Scalar>(logits: &Array2<F>, row: usize, t: f64) -> Vec<f64> {
    let r = logits.row(row);
    let max = r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64() / t));
    let lse = r.iter().map(|&x| (x.as_f64() / t - max).exp()).sum::<f64>().ln() + max;
    r.iter().map(|&x| x.as_f64() / t - lse).collect()
}

/// Weight `1 / (n_b * B_eff)` of each batch element, from its count of valid items.
fn element_weights(counts: &[usize], what: &str) -> Result<Vec<f64>> {
    let nonempty = counts.iter().filter(|&&c| c > 0).count();
    if nonempty == 0 {
        return Err(Error::UndefinedMean(format!("{what}: every position is masked")));
    }
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / (c as f64 * nonempty as f64) })
        .collect())
}

fn position_weights<F: Scalar>(trace: &ForwardTrace<F>, what: &str) -> Result<Vec<f64>> {
    let counts: Vec<usize> = (0..trace.batch).map(|b| trace.valid_positions(b)).collect();
    element_weights(&counts, what)
}

fn check_aligned<F: Scalar>(teacher: &ForwardTrace<F>, student: &ForwardTrace<F>) -> Result<()> {
    if teacher.batch != student.batch || teacher.tgt_len != student.tgt_len {
        return Err(Error::Alignment(format!(
            "teacher batch {}x{} vs student {}x{}",
            teacher.batch, teacher.tgt_len, student.batch, student.tgt_len
        )));
    }
    if teacher.target_mask != student.target_mask {
        return Err(Error::Alignment("teacher and student masks differ".into()));
    }
    if teacher.logits.dim() != student.logits.dim() {
        return Err(Error::Alignment("teacher and student vocabularies differ".into()));
    }
    Ok(())
}

/// Mean token negative log-likelihood with label smoothing: the target keeps
/// `1 - smoothing` and the remaining mass is spread evenly over the other entries.
pub fn mle_loss<F: Scalar>(trace: &ForwardTrace<F>, targets: &[usize], smoothing: f64) -> Result<LossOutput<F>> {
    if targets.len() != trace.logits.nrows() {
        return Err(Error::Alignment(format!(
            "{} targets for {} logit rows",
            targets.len(),
            trace.logits.nrows()
        )));
    }
    if !(0.0..0.5).contains(&smoothing) {
        return Err(Error::config(format!("label smoothing {smoothing} must lie in [0, 0.5)")));
    }
    let v = trace.logits.ncols();
    let weights = position_weights(trace, "mle loss")?;
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    let on = 1.0 - smoothing;
    let mut grad = Array2::<F>::zeros(trace.logits.raw_dim());
    let mut value = 0.0;
    for b in 0..trace.batch {
        for i in 0..trace.tgt_len {
            let row = b * trace.tgt_len + i;
            if !trace.target_mask[row] {
                continue;
            }
            let y = targets[row];
            if y >= v || y == PAD {
                return Err(Error::Alignment(format!("target {y} at row {row} is not a valid label")));
            }
            let w = weights[b];
            let logp = log_softmax_rows(&trace.logits, row, 1.0);
            let mut loss = 0.0;
            for (k, &lp) in logp.iter().enumerate() {
                let q = if k == y { on } else { off };
                if q != 0.0 {
                    loss -= q * lp;
                }
                grad[(row, k)] = F::of(w * (lp.exp() - q));
            }
            value += w * loss;
        }
    }
    let mut g = TraceGrad::empty(trace.num_layers());
    g.logits = Some(grad);
    Ok(LossOutput { value, grad: g })
}

/// Per-row candidate token sets for token-level unlikelihood.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativeCandidateSet {
    /// Indexed like trace rows (`b * tgt_len + i`); missing rows have no candidates.
    pub rows: Vec<Vec<usize>>,
}

impl NegativeCandidateSet {
    pub fn new(rows: Vec<Vec<usize>>) -> Self {
        let rows = rows
            .into_iter()
            .map(|mut r| {
                r.sort_unstable();
                r.dedup();
                r
            })
            .collect();
        Self { rows }
    }

    /// Classic unlikelihood candidates: tokens of the target prefix `r_<i`, minus `r_i`.
    pub fn previous_context<F: Scalar>(trace: &ForwardTrace<F>) -> Self {
        let mut rows = vec![Vec::new(); trace.batch * trace.tgt_len];
        for b in 0..trace.batch {
            for i in 0..trace.tgt_len {
                let row = b * trace.tgt_len + i;
                if !trace.target_mask[row] {
                    continue;
                }
                let cur = trace.targets[row];
                rows[row] = trace.targets[b * trace.tgt_len..row]
                    .iter()
                    .copied()
                    .filter(|&t| t != cur && t != PAD)
                    .collect();
            }
        }
        Self::new(rows)
    }
}

/// `mean_i sum_{c in C_i} -log(1 - p(c))`, with `p` clamped below `1 - CLAMP_EPS`.
pub fn ul_loss<F: Scalar>(trace: &ForwardTrace<F>, candidates: &NegativeCandidateSet) -> Result<LossOutput<F>> {
    let v = trace.logits.ncols();
    if let Some(bad) = candidates.rows.iter().flatten().find(|&&c| c >= v) {
        return Err(Error::config(format!("candidate id {bad} outside vocabulary of {v}")));
    }
    let weights = position_weights(trace, "unlikelihood loss")?;
    let mut grad = Array2::<F>::zeros(trace.logits.raw_dim());
    let mut value = 0.0;
    for b in 0..trace.batch {
        for i in 0..trace.tgt_len {
            let row = b * trace.tgt_len + i;
            let cands = candidates.rows.get(row).map(Vec::as_slice).unwrap_or(&[]);
            if !trace.target_mask[row] || cands.is_empty() {
                continue;
            }
            let w = weights[b];
            let p: Vec<f64> = log_softmax_rows(&trace.logits, row, 1.0).iter().map(|x| x.exp()).collect();
            let mut coef = vec![0.0; v];
            for &c in cands {
                let pc = p[c].min(1.0 - CLAMP_EPS);
                value -= w * (1.0 - pc).ln();
                if p[c] < 1.0 - CLAMP_EPS {
                    coef[c] = 1.0 / (1.0 - p[c]);
                }
            }
            write_unlikelihood_grad(&mut grad, row, &p, &coef, w, 1.0);
        }
    }
    let mut g = TraceGrad::empty(trace.num_layers());
    g.logits = Some(grad);
    Ok(LossOutput { value, grad: g })
}

/// For `L = -sum_k a_k log(1 - p_k)` with `coef_k = a_k / (1 - p_k)` and
/// `p = softmax(z / t)`: `dL/dz_j = (coef_j p_j - p_j sum_k coef_k p_k) / t`.
fn write_unlikelihood_grad<F: Scalar>(grad: &mut Array2<F>, row: usize, p: &[f64], coef: &[f64], w: f64, t: f64) {
    let s: f64 = coef.iter().zip(p).map(|(c, p)| c * p).sum();
    for j in 0..p.len() {
        grad[(row, j)] = F::of(w * p[j] * (coef[j] - s) / t);
    }
}

/// Positive distillation: `mean_i -sum_k p_T(k) log p_S(k)`, both softened by `t`.
pub fn kd_loss<F: Scalar>(teacher: &ForwardTrace<F>, student: &ForwardTrace<F>, t: f64) -> Result<LossOutput<F>> {
    check_temperature(t)?;
    check_aligned(teacher, student)?;
    let weights = position_weights(student, "kd loss")?;
    let mut grad = Array2::<F>::zeros(student.logits.raw_dim());
    let mut value = 0.0;
    for b in 0..student.batch {
        for i in 0..student.tgt_len {
            let row = b * student.tgt_len + i;
            if !student.target_mask[row] {
                continue;
            }
            let w = weights[b];
            let pt: Vec<f64> = log_softmax_rows(&teacher.logits, row, t).iter().map(|x| x.exp()).collect();
            let ls = log_softmax_rows(&student.logits, row, t);
            for k in 0..pt.len() {
                if pt[k] > 0.0 {
                    value -= w * pt[k] * ls[k];
                }
                grad[(row, k)] = F::of(w * (ls[k].exp() - pt[k]) / t);
            }
        }
    }
    let mut g = TraceGrad::empty(student.num_layers());
    g.logits = Some(grad);
    Ok(LossOutput { value, grad: g })
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature {t} must be positive")))
    }
}

/// Which distribution the prediction-layer term pushes the student away from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeTarget {
    /// The teacher's softened distribution.
    Soft,
    /// One-hot on the teacher's most likely token at each position.
    Hard,
    /// One-hot on the tokens of a randomly drawn negative-set response.
    Random,
}

impl std::str::FromStr for NegativeTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "random" => Ok(Self::Random),
            other => Err(Error::config(format!("unknown negative target {other:?}"))),
        }
    }
}

/// Target distribution per trace row for the soft unlikelihood term.
pub fn prediction_targets<F: Scalar>(
    teacher: &ForwardTrace<F>,
    kind: NegativeTarget,
    t: f64,
    random_tokens: Option<&[usize]>,
) -> Result<Array2<f64>> {
    check_temperature(t)?;
    let (rows, v) = teacher.logits.dim();
    let mut out = Array2::<f64>::zeros((rows, v));
    match kind {
        NegativeTarget::Soft => {
            for r in 0..rows {
                for (k, lp) in log_softmax_rows(&teacher.logits, r, t).into_iter().enumerate() {
                    out[(r, k)] = lp.exp();
                }
            }
        }
        NegativeTarget::Hard => {
            for r in 0..rows {
                let row = teacher.logits.row(r);
                let mut best = 0;
                for k in 1..v {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                out[(r, best)] = 1.0;
            }
        }
        NegativeTarget::Random => {
            let toks = random_tokens
                .ok_or_else(|| Error::config("random negative targets need sampled tokens"))?;
            if toks.len() != rows {
                return Err(Error::Alignment(format!("{} random targets for {rows} rows", toks.len())));
            }
            for (r, &tok) in toks.iter().enumerate() {
                if tok != PAD {
                    if tok >= v {
                        return Err(Error::config(format!("random target {tok} outside vocabulary")));
                    }
                    out[(r, tok)] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Soft unlikelihood against an explicit target distribution per row.
pub fn soft_unlikelihood<F: Scalar>(student: &ForwardTrace<F>, targets: &Array2<f64>, t: f64) -> Result<LossOutput<F>> {
    check_temperature(t)?;
    if targets.dim() != student.logits.dim() {
        return Err(Error::Alignment(format!(
            "target distribution {:?} vs logits {:?}",
            targets.dim(),
            student.logits.dim()
        )));
    }
    let weights = position_weights(student, "prediction distillation")?;
    let v = student.logits.ncols();
    let mut grad = Array2::<F>::zeros(student.logits.raw_dim());
    let mut value = 0.0;
    let mut coef = vec![0.0; v];
    for b in 0..student.batch {
        for i in 0..student.tgt_len {
            let row = b * student.tgt_len + i;
            if !student.target_mask[row] {
                continue;
            }
            let w = weights[b];
            let p: Vec<f64> = log_softmax_rows(&student.logits, row, t).iter().map(|x| x.exp()).collect();
            for k in 0..v {
                let a = targets[(row, k)];
                coef[k] = 0.0;
                if a == 0.0 {
                    continue;
                }
                let pk = p[k].min(1.0 - CLAMP_EPS);
                value -= w * a * (1.0 - pk).ln();
                if p[k] < 1.0 - CLAMP_EPS {
                    coef[k] = a / (1.0 - p[k]);
                }
            }
            write_unlikelihood_grad(&mut grad, row, &p, &coef, w, t);
        }
    }
    let mut g = TraceGrad::empty(student.num_layers());
    g.logits = Some(grad);
    Ok(LossOutput { value, grad: g })
}

/// `mean_i -sum_k p_N(k) log(1 - p_S(k))` with both distributions softened by `t`.
pub fn nd_pred_loss<F: Scalar>(teacher: &ForwardTrace<F>, student: &ForwardTrace<F>, t: f64) -> Result<LossOutput<F>> {
    check_aligned(teacher, student)?;
    let targets = prediction_targets(teacher, NegativeTarget::Soft, t, None)?;
    soft_unlikelihood(student, &targets, t)
}

#[derive(Debug, Clone)]
pub struct MrseOutput<F> {
    pub value: f64,
    /// Gradient with respect to `b`; the gradient for `a` is its negation.
    pub grad_b: Array2<F>,
}

/// Mean reverse square error `(1/n) sum_valid exp(-(a_i - b_i)^2)` over elements where
/// `mask` is true.
pub fn mrse<F: Scalar>(a: &Array2<F>, b: &Array2<F>, mask: &Array2<bool>) -> Result<MrseOutput<F>> {
    if a.dim() != b.dim() || a.dim() != mask.dim() {
        return Err(Error::shape(format!(
            "mrse operands {:?}, {:?}, mask {:?}",
            a.dim(),
            b.dim(),
            mask.dim()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::UndefinedMean("mrse over zero valid elements".into()));
    }
    let inv = 1.0 / n as f64;
    let mut grad_b = Array2::<F>::zeros(b.raw_dim());
    let mut value = 0.0;
    for ((idx, &m), g) in mask.indexed_iter().zip(grad_b.iter_mut()) {
        if !m {
            continue;
        }
        let d = a[idx].as_f64() - b[idx].as_f64();
        let e = (-d * d).exp();
        value += e;
        *g = F::of(inv * 2.0 * d * e);
    }
    Ok(MrseOutput {
        value: value * inv,
        grad_b,
    })
}

/// Accumulates one batch-reduced MRSE term: element `b` owns `rows_per_element` rows of
/// both matrices and `valid(b, r, c)` selects its entries.
fn batched_mrse<F: Scalar>(
    teacher: &Array2<F>,
    student: &Array2<F>,
    batch: usize,
    rows_per_element: usize,
    valid: impl Fn(usize, usize, usize) -> bool,
    what: &str,
) -> Result<(f64, Array2<F>)> {
    let cols = student.ncols();
    let counts: Vec<usize> = (0..batch)
        .map(|b| {
            (0..rows_per_element)
                .map(|r| (0..cols).filter(|&c| valid(b, r, c)).count())
                .sum()
        })
        .collect();
    let weights = element_weights(&counts, what)?;
    let mut grad = Array2::<F>::zeros(student.raw_dim());
    let mut value = 0.0;
    for b in 0..batch {
        let w = weights[b];
        if w == 0.0 {
            continue;
        }
        for r in 0..rows_per_element {
            let row = b * rows_per_element + r;
            for c in 0..cols {
                if !valid(b, r, c) {
                    continue;
                }
                let d = teacher[(row, c)].as_f64() - student[(row, c)].as_f64();
                let e = (-d * d).exp();
                value += w * e;
                grad[(row, c)] = F::of(w * 2.0 * d * e);
            }
        }
    }
    Ok((value, grad))
}

/// `sum_l mrse(H_N^l, H_S^l)` over unmasked target positions.
pub fn nd_hidden_loss<F: Scalar>(teacher: &ForwardTrace<F>, student: &ForwardTrace<F>) -> Result<LossOutput<F>> {
    if teacher.num_layers() != student.num_layers() {
        return Err(Error::Architecture(format!(
            "teacher has {} decoder layers, student {}",
            teacher.num_layers(),
            student.num_layers()
        )));
    }
    check_aligned(teacher, student)?;
    let mut g = TraceGrad::empty(student.num_layers());
    let mut value = 0.0;
    for l in 0..student.num_layers() {
        let (hn, hs) = (&teacher.decoder_hidden[l], &student.decoder_hidden[l]);
        if hn.dim() != hs.dim() {
            return Err(Error::Architecture(format!("hidden width differs at layer {l}")));
        }
        let t = student.tgt_len;
        let (v, grad) = batched_mrse(hn, hs, student.batch, t, |b, i, _| student.target_mask[b * t + i], "hidden distillation")?;
        value += v;
        g.decoder_hidden[l] = Some(grad);
    }
    Ok(LossOutput { value, grad: g })
}

/// `sum_l mrse(A_N^l, A_S^l)` over causally valid, non-pad pre-softmax scores, all heads
/// pooled. With `include_cross` the encoder-decoder scores of each layer are added too.
pub fn nd_attention_loss<F: Scalar>(
    teacher: &ForwardTrace<F>,
    student: &ForwardTrace<F>,
    include_cross: bool,
) -> Result<LossOutput<F>> {
    if teacher.heads != student.heads {
        return Err(Error::Architecture(format!(
            "teacher has {} heads, student {}",
            teacher.heads, student.heads
        )));
    }
    if teacher.num_layers() != student.num_layers() {
        return Err(Error::Architecture("decoder layer counts differ".into()));
    }
    check_aligned(teacher, student)?;
    let t = student.tgt_len;
    let h = student.heads;
    let mut g = TraceGrad::empty(student.num_layers());
    let mut value = 0.0;
    for l in 0..student.num_layers() {
        let (an, as_) = (&teacher.decoder_self_attention_scores[l], &student.decoder_self_attention_scores[l]);
        if an.dim() != as_.dim() {
            return Err(Error::Architecture(format!("attention shape differs at layer {l}")));
        }
        let (v, grad) = batched_mrse(an, as_, student.batch, h * t, |b, r, j| student.self_score_valid(b, r % t, j), "attention distillation")?;
        value += v;
        g.decoder_self_attention_scores[l] = Some(grad);
    }
    if include_cross {
        let (Some(cn), Some(cs)) = (&teacher.cross_attention_scores, &student.cross_attention_scores) else {
            return Err(Error::Architecture("cross-attention scores were not traced".into()));
        };
        if teacher.src_mask != student.src_mask {
            return Err(Error::Alignment("source masks differ".into()));
        }
        for l in 0..student.num_layers() {
            let (v, grad) = batched_mrse(&cn[l], &cs[l], student.batch, h * t, |b, r, j| student.cross_score_valid(b, r % t, j), "cross-attention distillation")?;
            value += v;
            g.cross_attention_scores[l] = Some(grad);
        }
    }
    Ok(LossOutput { value, grad: g })
}

/// Rise-fall weighting `alpha(s) = lambda * e^{-z} / (e^{-z} + 1)^2`, `z = beta (s - gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Constant alpha replacing the schedule when set.
    pub fixed_alpha: Option<f64>,
}

impl ScheduleConfig {
    /// `lambda = 4`, `gamma = 25600`, `beta = 6 / gamma`.
    pub fn full_scale() -> Self {
        Self::peaked_at(25600.0)
    }

    /// `lambda = 4`, `beta = 6 / gamma`.
    pub fn peaked_at(gamma: f64) -> Self {
        Self {
            lambda: 4.0,
            beta: 6.0 / gamma,
            gamma,
            fixed_alpha: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("fixed alpha {a} must lie in [0, 1]")));
            }
            return Ok(());
        }
        if !(0.0..=4.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} must lie in [0, 4] so alpha stays in [0, 1]", self.lambda)));
        }
        if self.lambda > 0.0 && !(self.beta > 0.0 && self.gamma > 0.0) {
            return Err(Error::config("beta and gamma must be positive"));
        }
        Ok(())
    }
}

pub fn alpha_schedule(step: u64, cfg: &ScheduleConfig) -> f64 {
    if let Some(a) = cfg.fixed_alpha {
        return a;
    }
    // e^{-z}/(e^{-z}+1)^2 is even in z; evaluating at -|z| avoids overflow
    let z = (cfg.beta * (step as f64 - cfg.gamma)).abs();
    let e = (-z).exp();
    cfg.lambda * e / ((e + 1.0) * (e + 1.0))
}

/// Mean of the progressive schedule over steps `1..=steps`; the constant used by the
/// fixed-alpha comparison.
pub fn mean_alpha(cfg: &ScheduleConfig, steps: u64) -> f64 {
    let progressive = ScheduleConfig {
        fixed_alpha: None,
        ..*cfg
    };
    (1..=steps).map(|s| alpha_schedule(s, &progressive)).sum::<f64>() / steps.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub include_pred: bool,
    pub include_hidden: bool,
    pub include_attention: bool,
    /// Adds encoder-decoder attention scores to the attention term.
    pub include_cross_attention: bool,
    /// Applied to the MLE term only.
    pub label_smoothing: f64,
    pub negative_target: NegativeTarget,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            include_pred: true,
            include_hidden: true,
            include_attention: true,
            include_cross_attention: false,
            label_smoothing: 0.1,
            negative_target: NegativeTarget::Soft,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} must lie in [0, 0.5)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Weighted contributions; they sum to the total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Breakdown {
    pub mle: f64,
    pub pred: f64,
    pub hidden: f64,
    pub attention: f64,
}

impl Breakdown {
    pub fn sum(&self) -> f64 {
        self.mle + self.pred + self.hidden + self.attention
    }
}

#[derive(Debug, Clone)]
pub struct CombinedLoss<F> {
    pub total: f64,
    pub alpha: f64,
    /// Unweighted values of the enabled terms (0 for disabled ones).
    pub raw: Breakdown,
    pub weighted: Breakdown,
    pub grad: TraceGrad<F>,
}

/// `(1 - alpha) L_mle + alpha (L_pred + sum_l L_hid^l + sum_l L_att^l)`, each negative
/// term only when enabled. `random_tokens` supplies per-row targets for
/// [`NegativeTarget::Random`].
pub fn combined_loss<F: Scalar>(
    student: &ForwardTrace<F>,
    teacher: &ForwardTrace<F>,
    alpha: f64,
    config: &DistillConfig,
    random_tokens: Option<&[usize]>,
) -> Result<CombinedLoss<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} must lie in [0, 1]")));
    }
    config.validate()?;
    check_aligned(teacher, student)?;
    let mut grad = TraceGrad::empty(student.num_layers());
    let mut raw = Breakdown::default();

    let mle = mle_loss(student, &student.targets, config.label_smoothing)?;
    raw.mle = mle.value;
    if alpha < 1.0 {
        grad.add_scaled(&mle.grad, 1.0 - alpha);
    }

    let mut negative = |value: &mut f64, out: LossOutput<F>| {
        *value = out.value;
        if alpha > 0.0 {
            grad.add_scaled(&out.grad, alpha);
        }
    };
    if config.include_pred {
        let targets = prediction_targets(teacher, config.negative_target, config.temperature, random_tokens)?;
        negative(&mut raw.pred, soft_unlikelihood(student, &targets, config.temperature)?);
    }
    if config.include_hidden {
        negative(&mut raw.hidden, nd_hidden_loss(teacher, student)?);
    }
    if config.include_attention {
        negative(&mut raw.attention, nd_attention_loss(teacher, student, config.include_cross_attention)?);
    }

    let weighted = Breakdown {
        mle: (1.0 - alpha) * raw.mle,
        pred: alpha * raw.pred,
        hidden: alpha * raw.hidden,
        attention: alpha * raw.attention,
    };
    Ok(CombinedLoss {
        total: weighted.sum(),
        alpha,
        raw,
        weighted,
        grad,
    })
}
