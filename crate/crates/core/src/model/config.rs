use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_k: usize,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// 2 layers, 2 heads, d_model 16, d_ff 32, d_k 8.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            d_k: 8,
            vocab_size,
            max_sequence_length: 64,
            dropout_rate: 0.1,
        }
    }

    /// 6 layers, 8 heads, d_model 512, d_ff 2048, d_k 64.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            num_encoder_layers: 6,
            num_decoder_layers: 6,
            num_heads: 8,
            d_model: 512,
            d_ff: 2048,
            d_k: 64,
            vocab_size,
            max_sequence_length: 256,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_k", self.d_k),
            ("max_sequence_length", self.max_sequence_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.num_heads * self.d_k {
            return Err(Error::config(format!(
                "d_model {} must equal num_heads {} x d_k {}",
                self.d_model, self.num_heads, self.d_k
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.vocab_size <= crate::corpus::UNK {
            return Err(Error::config("vocab_size must exceed the reserved ids"));
        }
        Ok(())
    }
}
