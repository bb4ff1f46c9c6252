//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored; every other line must be a known
//! key. Unset keys keep their desk-scale defaults; `schedule.gamma` defaults to twice the
//! warm-up and `schedule.beta` to `6 / gamma`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{DistillConfig, NegativeTarget, ScheduleConfig};
use crate::model::ModelConfig;

use super::OptimConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub vocab_max_size: usize,
    pub filter_ratio: f64,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_k: usize,
    pub max_sequence_length: usize,
    pub dropout_rate: f64,
    pub optim: OptimConfig,
    pub lambda: f64,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub fixed_alpha: Option<f64>,
    pub distill: DistillConfig,
    /// Train the student on `D \ D_N` instead of the full raw set.
    pub exclude_negative: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            valid_path: None,
            vocab_max_size: 10_000,
            filter_ratio: 0.5,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 128,
            d_k: 16,
            max_sequence_length: 64,
            dropout_rate: 0.1,
            optim: OptimConfig::desk(64),
            lambda: 4.0,
            beta: None,
            gamma: None,
            fixed_alpha: None,
            distill: DistillConfig::default(),
            exclude_negative: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn opt_str(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Every documented key.
    pub const KEYS: &'static [&'static str] = &[
        "data.train",
        "data.valid",
        "vocab.max_size",
        "filter.ratio",
        "seed",
        "model.num_encoder_layers",
        "model.num_decoder_layers",
        "model.num_heads",
        "model.d_model",
        "model.d_ff",
        "model.d_k",
        "model.max_sequence_length",
        "model.dropout_rate",
        "optim.warmup_steps",
        "optim.batch_size",
        "optim.max_steps",
        "optim.beta1",
        "optim.beta2",
        "optim.epsilon",
        "optim.validation_interval",
        "optim.patience",
        "optim.label_smoothing",
        "schedule.lambda",
        "schedule.beta",
        "schedule.gamma",
        "schedule.fixed_alpha",
        "distill.temperature",
        "distill.include_pred",
        "distill.include_hidden",
        "distill.include_attention",
        "distill.include_cross_attention",
        "distill.label_smoothing",
        "distill.negative_target",
        "distill.exclude_negative",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.train" => self.train_path = Some(PathBuf::from(v)),
            "data.valid" => self.valid_path = Some(PathBuf::from(v)),
            "vocab.max_size" => self.vocab_max_size = parse_value(key, v)?,
            "filter.ratio" => self.filter_ratio = parse_value(key, v)?,
            "seed" => self.optim.seed = parse_value(key, v)?,
            "model.num_encoder_layers" => self.num_encoder_layers = parse_value(key, v)?,
            "model.num_decoder_layers" => self.num_decoder_layers = parse_value(key, v)?,
            "model.num_heads" => self.num_heads = parse_value(key, v)?,
            "model.d_model" => {
                self.d_model = parse_value(key, v)?;
                self.optim.d_model = self.d_model;
            }
            "model.d_ff" => self.d_ff = parse_value(key, v)?,
            "model.d_k" => self.d_k = parse_value(key, v)?,
            "model.max_sequence_length" => self.max_sequence_length = parse_value(key, v)?,
            "model.dropout_rate" => self.dropout_rate = parse_value(key, v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = parse_value(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse_value(key, v)?,
            "optim.max_steps" => self.optim.max_steps = parse_value(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_value(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_value(key, v)?,
            "optim.epsilon" => self.optim.epsilon = parse_value(key, v)?,
            "optim.validation_interval" => self.optim.validation_interval = parse_value(key, v)?,
            "optim.patience" => self.optim.patience = parse_value(key, v)?,
            "optim.label_smoothing" => self.optim.label_smoothing = parse_value(key, v)?,
            "schedule.lambda" => self.lambda = parse_value(key, v)?,
            "schedule.beta" => self.beta = parse_optional(key, v)?,
            "schedule.gamma" => self.gamma = parse_optional(key, v)?,
            "schedule.fixed_alpha" => self.fixed_alpha = parse_optional(key, v)?,
            "distill.temperature" => self.distill.temperature = parse_value(key, v)?,
            "distill.include_pred" => self.distill.include_pred = parse_value(key, v)?,
            "distill.include_hidden" => self.distill.include_hidden = parse_value(key, v)?,
            "distill.include_attention" => self.distill.include_attention = parse_value(key, v)?,
            "distill.include_cross_attention" => self.distill.include_cross_attention = parse_value(key, v)?,
            "distill.label_smoothing" => self.distill.label_smoothing = parse_value(key, v)?,
            "distill.negative_target" => self.distill.negative_target = v.parse::<NegativeTarget>()?,
            "distill.exclude_negative" => self.exclude_negative = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k}")));
            }
            cfg.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_encoder_layers: self.num_encoder_layers,
            num_decoder_layers: self.num_decoder_layers,
            num_heads: self.num_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            d_k: self.d_k,
            vocab_size,
            max_sequence_length: self.max_sequence_length,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        let gamma = self.gamma.unwrap_or(2.0 * self.optim.warmup_steps as f64);
        ScheduleConfig {
            lambda: self.lambda,
            beta: self.beta.unwrap_or(6.0 / gamma),
            gamma,
            fixed_alpha: self.fixed_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(crate::corpus::UNK + 1).validate()?;
        self.optim.validate()?;
        if self.optim.d_model != self.d_model {
            return Err(Error::config("optimiser d_model differs from model.d_model"));
        }
        self.schedule().validate()?;
        self.distill.validate()?;
        if !(self.filter_ratio > 0.0 && self.filter_ratio <= 1.0) {
            return Err(Error::config(format!("filter.ratio {} must lie in (0, 1]", self.filter_ratio)));
        }
        if self.vocab_max_size <= crate::corpus::UNK + 1 {
            return Err(Error::config("vocab.max_size must leave room beyond the reserved ids"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in [`RunConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = self.schedule();
        let d = &self.distill;
        let o = &self.optim;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        let target = match d.negative_target {
            NegativeTarget::Soft => "soft",
            NegativeTarget::Hard => "hard",
            NegativeTarget::Random => "random",
        };
        let values = [
            path(&self.train_path),
            path(&self.valid_path),
            self.vocab_max_size.to_string(),
            self.filter_ratio.to_string(),
            o.seed.to_string(),
            self.num_encoder_layers.to_string(),
            self.num_decoder_layers.to_string(),
            self.num_heads.to_string(),
            self.d_model.to_string(),
            self.d_ff.to_string(),
            self.d_k.to_string(),
            self.max_sequence_length.to_string(),
            self.dropout_rate.to_string(),
            o.warmup_steps.to_string(),
            o.batch_size.to_string(),
            o.max_steps.to_string(),
            o.beta1.to_string(),
            o.beta2.to_string(),
            o.epsilon.to_string(),
            o.validation_interval.to_string(),
            o.patience.to_string(),
            o.label_smoothing.to_string(),
            s.lambda.to_string(),
            s.beta.to_string(),
            s.gamma.to_string(),
            opt_str(s.fixed_alpha),
            d.temperature.to_string(),
            d.include_pred.to_string(),
            d.include_hidden.to_string(),
            d.include_attention.to_string(),
            d.include_cross_attention.to_string(),
            d.label_smoothing.to_string(),
            target.to_string(),
            self.exclude_negative.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
