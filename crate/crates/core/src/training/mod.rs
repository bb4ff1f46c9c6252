//! Optimisation: Adam with inverse-square-root warm-up, the shared training loop used for
//! the negative teacher, the MLE baseline and the distilled student, resumable training
//! state and CSV logs.
//!
//! All randomness is a pure function of `(seed, step)`: the batch order of an epoch, the
//! dropout masks of a step and the random negatives of a step. The step counter is
//! therefore the whole RNG state, and resuming from a saved [`TrainState`] continues
//! bit for bit.

mod config;

pub use config::RunConfig;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, EOS, PAD};
use crate::error::{Error, Result};
use crate::losses::{
    alpha_schedule, combined_loss, mle_loss, Breakdown, DistillConfig, NegativeTarget, ScheduleConfig,
};
use crate::model::{
    forward_batch, init_parameters, Container, ForwardOptions, ModelConfig, Mode, PaddedBatch, Parameters,
    TraceGrad,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub warmup_steps: u64,
    pub d_model: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub validation_interval: u64,
    /// Validation intervals without improvement before stopping.
    pub patience: usize,
    /// Label smoothing of the MLE objective for teacher and baseline runs.
    pub label_smoothing: f64,
}

impl OptimConfig {
    /// Batch 32, 200 warm-up steps, 5000 steps, validation every 100 steps.
    pub fn desk(d_model: usize) -> Self {
        Self {
            warmup_steps: 200,
            d_model,
            batch_size: 32,
            max_steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-9,
            seed: 0,
            validation_interval: 100,
            patience: 10,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.d_model < 1 {
            return Err(Error::config("d_model must be positive"));
        }
        if self.validation_interval < 1 {
            return Err(Error::config("validation_interval must be at least 1"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// `2 * min(1/sqrt(s), s/sqrt(s_wp^3)) / sqrt(d_model)`.
pub fn lr_schedule(step: u64, cfg: &OptimConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Domain("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    let wp = cfg.warmup_steps as f64;
    Ok(2.0 * (1.0 / s.sqrt()).min(s / (wp * wp * wp).sqrt()) / (cfg.d_model as f64).sqrt())
}

/// splitmix64 over a seed and two stream coordinates.
fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EPOCH: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_RANDOM_NEGATIVE: u64 = 3;

/// Indices grouped into batches of similar length (stable sort on response then query
/// length); the last batch may be short.
pub fn bucket_batches(data: &Dataset, batch_size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by_key(|&i| (data.pairs[i].response.len(), data.pairs[i].query.len()));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn padded(data: &Dataset, idx: &[usize], max_len: usize) -> Result<PaddedBatch> {
    let pairs: Vec<(&[usize], &[usize])> = idx
        .iter()
        .map(|&i| (data.pairs[i].query.as_slice(), data.pairs[i].response.as_slice()))
        .collect();
    PaddedBatch::new(&pairs, max_len)
}

/// One CSV line of the training log, written at every validation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    /// Mean training loss since the previous validation.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Mean weighted loss components since the previous validation.
    pub breakdown: Breakdown,
}

pub const LOG_HEADER: &str = "step,train_loss,valid_loss,alpha,lr,mle,pred,hidden,attention";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.train_loss, self.valid_loss, self.alpha, self.lr, b.mle, b.pred, b.hidden, b.attention
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Checkpoint(format!("malformed log row {line:?}")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Checkpoint(format!("malformed log value {:?}", f[i])))
        };
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::Checkpoint("malformed log step".into()))?,
            train_loss: num(1)?,
            valid_loss: num(2)?,
            alpha: num(3)?,
            lr: num(4)?,
            breakdown: Breakdown {
                mle: num(5)?,
                pred: num(6)?,
                hidden: num(7)?,
                attention: num(8)?,
            },
        })
    }
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: Parameters<f32>,
    pub first_moment: Vec<Array2<f32>>,
    pub second_moment: Vec<Array2<f32>>,
    pub best_valid: Option<f64>,
    pub best_step: u64,
    pub best_params: Parameters<f32>,
    pub intervals_since_best: usize,
    pub stopped: bool,
    pub log: Vec<LogRow>,
    pending_loss: f64,
    pending_breakdown: Breakdown,
    pending_steps: u64,
}

impl TrainState {
    pub fn new(params: Parameters<f32>) -> Self {
        let zeros: Vec<Array2<f32>> = params.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Self {
            step: 0,
            best_params: params.clone(),
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
            best_valid: None,
            best_step: 0,
            intervals_since_best: 0,
            stopped: false,
            log: Vec::new(),
            pending_loss: 0.0,
            pending_breakdown: Breakdown::default(),
            pending_steps: 0,
        }
    }

    pub fn to_container(&self) -> Container {
        let base = self.params.to_container();
        let mut meta = base.meta.clone();
        let bits = |x: f64| format!("{:016x}", x.to_bits());
        meta.push(("state.step".into(), self.step.to_string()));
        if let Some(v) = self.best_valid {
            meta.push(("state.best_valid".into(), bits(v)));
        }
        meta.push(("state.best_step".into(), self.best_step.to_string()));
        meta.push(("state.intervals_since_best".into(), self.intervals_since_best.to_string()));
        meta.push(("state.stopped".into(), self.stopped.to_string()));
        meta.push(("state.pending_loss".into(), bits(self.pending_loss)));
        meta.push(("state.pending_steps".into(), self.pending_steps.to_string()));
        let pb = &self.pending_breakdown;
        for (k, v) in [("mle", pb.mle), ("pred", pb.pred), ("hidden", pb.hidden), ("attention", pb.attention)] {
            meta.push((format!("state.pending_{k}"), bits(v)));
        }
        for (i, row) in self.log.iter().enumerate() {
            meta.push((format!("state.log.{i}"), row.to_csv()));
        }
        let mut tensors = Vec::new();
        let names: Vec<&str> = self.params.specs().iter().map(|s| s.name.as_str()).collect();
        for (prefix, ts) in [
            ("param", self.params.tensors()),
            ("m", &self.first_moment[..]),
            ("v", &self.second_moment[..]),
            ("best", self.best_params.tensors()),
        ] {
            for (name, t) in names.iter().zip(ts) {
                tensors.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        Container { meta, tensors }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let section = |prefix: &str| Container {
            meta: c.meta.clone(),
            tensors: c
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect(),
        };
        let params = Parameters::<f32>::from_container(&section("param."))?;
        let best_params = Parameters::<f32>::from_container(&section("best."))?;
        let moments = |prefix: &str| -> Result<Vec<Array2<f32>>> {
            let s = section(prefix);
            params
                .specs()
                .iter()
                .map(|spec| {
                    s.tensor(&spec.name)
                        .filter(|t| t.dim() == (spec.rows, spec.cols))
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimiser moment {prefix}{}", spec.name)))
                })
                .collect()
        };
        let bits = |key: &str| -> Result<f64> {
            let raw = c.meta(key).ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))?;
            u64::from_str_radix(raw, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::Checkpoint(format!("header key {key} has an invalid value")))
        };
        let mut log = Vec::new();
        while let Some(line) = c.meta(&format!("state.log.{}", log.len())) {
            log.push(LogRow::from_csv(line)?);
        }
        Ok(Self {
            step: c.parse_meta("state.step")?,
            first_moment: moments("m.")?,
            second_moment: moments("v.")?,
            best_valid: c.meta("state.best_valid").map(|_| bits("state.best_valid")).transpose()?,
            best_step: c.parse_meta("state.best_step")?,
            intervals_since_best: c.parse_meta("state.intervals_since_best")?,
            stopped: c.parse_meta("state.stopped")?,
            log,
            pending_loss: bits("state.pending_loss")?,
            pending_steps: c.parse_meta("state.pending_steps")?,
            pending_breakdown: Breakdown {
                mle: bits("state.pending_mle")?,
                pred: bits("state.pending_pred")?,
                hidden: bits("state.pending_hidden")?,
                attention: bits("state.pending_attention")?,
            },
            params,
            best_params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// What a training run minimises.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Label-smoothed MLE (teacher and baseline).
    Mle,
    /// The combined objective against a frozen teacher. `negative_pool` supplies the
    /// responses drawn for [`NegativeTarget::Random`].
    Distill {
        teacher: &'a Parameters<f32>,
        schedule: ScheduleConfig,
        distill: DistillConfig,
        negative_pool: Option<&'a Dataset>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub alpha: f64,
    pub lr: f64,
    pub breakdown: Breakdown,
    /// Validation loss, when this step ended a validation interval.
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub params: Parameters<f32>,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn log(&self) -> &[LogRow] {
        &self.state.log
    }
}

pub struct Trainer<'a> {
    train: &'a Dataset,
    valid: &'a Dataset,
    model: ModelConfig,
    optim: OptimConfig,
    objective: Objective<'a>,
    batches: Vec<Vec<usize>>,
    valid_batches: Vec<Vec<usize>>,
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig {
        dropout_rate: 0.0,
        ..a.clone()
    } == ModelConfig {
        dropout_rate: 0.0,
        ..b.clone()
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a Dataset,
        valid: &'a Dataset,
        model: &ModelConfig,
        optim: &OptimConfig,
        objective: Objective<'a>,
    ) -> Result<Self> {
        model.validate()?;
        optim.validate()?;
        if optim.d_model != model.d_model {
            return Err(Error::config(format!(
                "optimiser d_model {} differs from model d_model {}",
                optim.d_model, model.d_model
            )));
        }
        if train.is_empty() {
            return Err(Error::EmptyInput("training set is empty".into()));
        }
        if valid.is_empty() {
            return Err(Error::EmptyInput("validation set is empty".into()));
        }
        for p in train.pairs.iter().chain(&valid.pairs) {
            if p.query.is_empty() {
                return Err(Error::EmptyInput(format!("empty query for response {:?}", p.raw_response)));
            }
            let len = p.query.len().max(p.response.len() + 1);
            if len > model.max_sequence_length {
                return Err(Error::SequenceTooLong {
                    len,
                    max: model.max_sequence_length,
                });
            }
            if let Some(&t) = p.query.iter().chain(&p.response).find(|&&t| t >= model.vocab_size) {
                return Err(Error::config(format!("token id {t} outside vocabulary of {}", model.vocab_size)));
            }
        }
        if let Objective::Distill {
            teacher,
            schedule,
            distill,
            negative_pool,
        } = &objective
        {
            if !same_architecture(teacher.config(), model) {
                return Err(Error::Architecture("teacher and student configurations differ".into()));
            }
            schedule.validate()?;
            distill.validate()?;
            if distill.negative_target == NegativeTarget::Random && negative_pool.is_none_or(Dataset::is_empty) {
                return Err(Error::config("random negative targets need a non-empty negative set"));
            }
        }
        Ok(Self {
            train,
            valid,
            model: model.clone(),
            optim: optim.clone(),
            objective,
            batches: bucket_batches(train, optim.batch_size),
            valid_batches: bucket_batches(valid, optim.batch_size),
        })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        Ok(TrainState::new(init_parameters(&self.model, self.optim.seed)?))
    }

    fn check_state(&self, state: &TrainState) -> Result<()> {
        if state.params.config() != &self.model {
            return Err(Error::Architecture("training state was created for another model".into()));
        }
        Ok(())
    }

    /// Training-set indices of the batch used at `step` (1-based).
    pub fn batch_for_step(&self, step: u64) -> &[usize] {
        let k = self.batches.len() as u64;
        let epoch = (step - 1) / k;
        let pos = ((step - 1) % k) as usize;
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.optim.seed, STREAM_EPOCH, epoch)));
        &self.batches[order[pos]]
    }

    fn random_targets(&self, pool: &Dataset, step: u64, batch: usize, tgt_len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.optim.seed, STREAM_RANDOM_NEGATIVE, step));
        let mut out = vec![PAD; batch * tgt_len];
        for b in 0..batch {
            let r = &pool.pairs[rng.gen_range(0..pool.len())].response;
            for i in 0..tgt_len {
                out[b * tgt_len + i] = match i.cmp(&r.len()) {
                    std::cmp::Ordering::Less => r[i],
                    std::cmp::Ordering::Equal => EOS,
                    std::cmp::Ordering::Greater => PAD,
                };
            }
        }
        out
    }

    /// Mean per-pair token NLL on the validation set in eval mode, without smoothing.
    pub fn validation_loss(&self, params: &Parameters<f32>) -> Result<f64> {
        let mut total = 0.0;
        for idx in &self.valid_batches {
            let batch = padded(self.valid, idx, self.model.max_sequence_length)?;
            let pass = forward_batch(params, &batch, &ForwardOptions::eval())?;
            let loss = mle_loss(&pass.trace, &pass.trace.targets, 0.0)?;
            total += loss.value * idx.len() as f64;
        }
        Ok(total / self.valid.len() as f64)
    }

    /// One optimiser update, followed by validation at interval boundaries and at
    /// `max_steps`.
    pub fn step(&self, state: &mut TrainState) -> Result<StepReport> {
        self.check_state(state)?;
        let s = state.step + 1;
        let batch = padded(self.train, self.batch_for_step(s), self.model.max_sequence_length)?;
        let cross = matches!(&self.objective, Objective::Distill { distill, .. } if distill.include_cross_attention);
        let opts = ForwardOptions {
            mode: Mode::Train,
            dropout_seed: mix(self.optim.seed, STREAM_DROPOUT, s),
            cross_attention: cross,
        };
        let pass = forward_batch(&state.params, &batch, &opts)?;
        let (loss, alpha, breakdown, grad): (f64, f64, Breakdown, TraceGrad<f32>) = match &self.objective {
            Objective::Mle => {
                let out = mle_loss(&pass.trace, &pass.trace.targets, self.optim.label_smoothing)?;
                let b = Breakdown {
                    mle: out.value,
                    ..Breakdown::default()
                };
                (out.value, 0.0, b, out.grad)
            }
            Objective::Distill {
                teacher,
                schedule,
                distill,
                negative_pool,
            } => {
                let teacher_opts = ForwardOptions {
                    cross_attention: cross,
                    ..ForwardOptions::eval()
                };
                let teacher_pass = forward_batch(teacher, &batch, &teacher_opts)?;
                let alpha = alpha_schedule(s, schedule);
                let random = match (distill.negative_target, negative_pool) {
                    (NegativeTarget::Random, Some(pool)) => Some(self.random_targets(pool, s, batch.batch, batch.tgt_len)),
                    _ => None,
                };
                let out = combined_loss(&pass.trace, &teacher_pass.trace, alpha, distill, random.as_deref())?;
                (out.total, alpha, out.weighted, out.grad)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {s}")));
        }
        let grads = pass.backward(&grad)?;
        let lr = lr_schedule(s, &self.optim)?;
        self.adam_update(state, &grads.tensors, lr, s)?;
        state.step = s;
        state.pending_loss += loss;
        state.pending_steps += 1;
        let pb = &mut state.pending_breakdown;
        pb.mle += breakdown.mle;
        pb.pred += breakdown.pred;
        pb.hidden += breakdown.hidden;
        pb.attention += breakdown.attention;

        let mut valid_loss = None;
        if s.is_multiple_of(self.optim.validation_interval) || s == self.optim.max_steps {
            let v = self.validation_loss(&state.params)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("validation loss at step {s}")));
            }
            self.record_validation(state, v, alpha, lr);
            valid_loss = Some(v);
        }
        Ok(StepReport {
            step: s,
            loss,
            alpha,
            lr,
            breakdown,
            valid_loss,
        })
    }

    fn record_validation(&self, state: &mut TrainState, v: f64, alpha: f64, lr: f64) {
        let n = state.pending_steps.max(1) as f64;
        let pb = state.pending_breakdown;
        state.log.push(LogRow {
            step: state.step,
            train_loss: state.pending_loss / n,
            valid_loss: v,
            alpha,
            lr,
            breakdown: Breakdown {
                mle: pb.mle / n,
                pred: pb.pred / n,
                hidden: pb.hidden / n,
                attention: pb.attention / n,
            },
        });
        state.pending_loss = 0.0;
        state.pending_steps = 0;
        state.pending_breakdown = Breakdown::default();
        if state.best_valid.is_none_or(|best| v < best) {
            state.best_valid = Some(v);
            state.best_step = state.step;
            state.best_params = state.params.clone();
            state.intervals_since_best = 0;
        } else {
            state.intervals_since_best += 1;
            if state.intervals_since_best >= self.optim.patience {
                state.stopped = true;
            }
        }
    }

    /// Adam in f64 with every stored value rounded to f32.
    fn adam_update(&self, state: &mut TrainState, grads: &[Array2<f32>], lr: f64, step: u64) -> Result<()> {
        let (b1, b2, eps) = (self.optim.beta1, self.optim.beta2, self.optim.epsilon);
        let c1 = 1.0 - b1.powi(step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(step.min(i32::MAX as u64) as i32);
        let TrainState {
            params,
            first_moment,
            second_moment,
            ..
        } = state;
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(first_moment).zip(second_moment) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient at step {step}")));
                }
                let m1 = b1 * *m as f64 + (1.0 - b1) * g;
                let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = m1 as f32;
                *v = v1 as f32;
                let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }

    /// Steps until `max_steps` or early stopping.
    pub fn run(&self, state: &mut TrainState) -> Result<()> {
        self.run_steps(state, u64::MAX)
    }

    /// At most `n` further steps, stopping early like [`Trainer::run`].
    pub fn run_steps(&self, state: &mut TrainState, n: u64) -> Result<()> {
        let mut done = 0;
        while done < n && !state.stopped && state.step < self.optim.max_steps {
            self.step(state)?;
            done += 1;
        }
        Ok(())
    }

    pub fn finish(state: TrainState) -> TrainOutcome {
        TrainOutcome {
            params: state.best_params.clone(),
            state,
        }
    }

    pub fn train(&self) -> Result<TrainOutcome> {
        let mut state = self.init_state()?;
        self.run(&mut state)?;
        Ok(Self::finish(state))
    }
}

/// Label-smoothed MLE on the negative set.
pub fn train_teacher(
    negative_set: &Dataset,
    valid: &Dataset,
    model: &ModelConfig,
    optim: &OptimConfig,
) -> Result<TrainOutcome> {
    Trainer::new(negative_set, valid, model, optim, Objective::Mle)?.train()
}

/// The standard MLE baseline; identical in every respect to [`train_teacher`] but named
/// for the data it is meant to see.
pub fn train_mle(train: &Dataset, valid: &Dataset, model: &ModelConfig, optim: &OptimConfig) -> Result<TrainOutcome> {
    Trainer::new(train, valid, model, optim, Objective::Mle)?.train()
}

#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    raw_set: &Dataset,
    valid: &Dataset,
    teacher: &Parameters<f32>,
    model: &ModelConfig,
    optim: &OptimConfig,
    schedule: &ScheduleConfig,
    distill: &DistillConfig,
    negative_pool: Option<&Dataset>,
) -> Result<TrainOutcome> {
    let objective = Objective::Distill {
        teacher,
        schedule: *schedule,
        distill: *distill,
        negative_pool,
    };
    Trainer::new(raw_set, valid, model, optim, objective)?.train()
}

/// Human-readable one-line summary of a finished run.
pub fn summary(outcome: &TrainOutcome) -> String {
    let mut s = String::new();
    let st = &outcome.state;
    let _ = write!(
        s,
        "steps={} best_step={} best_valid={} stopped_early={}",
        st.step,
        st.best_step,
        st.best_valid.map_or("n/a".to_string(), |v| format!("{v:.6}")),
        st.stopped
    );
    s
}
