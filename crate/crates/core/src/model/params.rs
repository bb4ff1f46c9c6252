use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub(crate) init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayerIdx {
    pub attn: AttnIdx,
    pub ln1: NormIdx,
    pub ff: FfIdx,
    pub ln2: NormIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: NormIdx,
    pub cross: AttnIdx,
    pub ln2: NormIdx,
    pub ff: FfIdx,
    pub ln3: NormIdx,
}

/// Tensor order and names for a config; indices point into `Parameters::tensors`.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub decoder: Vec<DecoderLayerIdx>,
    pub out_w: usize,
    pub out_b: usize,
    pub specs: Vec<TensorSpec>,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    d: usize,
    d_ff: usize,
}

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(TensorSpec {
            name,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn attn(&mut self, p: &str) -> AttnIdx {
        let d = self.d;
        AttnIdx {
            wq: self.push(format!("{p}.wq"), d, d, xavier(d, d)),
            bq: self.push(format!("{p}.bq"), 1, d, Init::Zeros),
            wk: self.push(format!("{p}.wk"), d, d, xavier(d, d)),
            bk: self.push(format!("{p}.bk"), 1, d, Init::Zeros),
            wv: self.push(format!("{p}.wv"), d, d, xavier(d, d)),
            bv: self.push(format!("{p}.bv"), 1, d, Init::Zeros),
            wo: self.push(format!("{p}.wo"), d, d, xavier(d, d)),
            bo: self.push(format!("{p}.bo"), 1, d, Init::Zeros),
        }
    }

    fn norm(&mut self, p: &str) -> NormIdx {
        NormIdx {
            gain: self.push(format!("{p}.gain"), 1, self.d, Init::Ones),
            bias: self.push(format!("{p}.bias"), 1, self.d, Init::Zeros),
        }
    }

    fn ff(&mut self, p: &str) -> FfIdx {
        let (d, f) = (self.d, self.d_ff);
        FfIdx {
            w1: self.push(format!("{p}.w1"), d, f, xavier(d, f)),
            b1: self.push(format!("{p}.b1"), 1, f, Init::Zeros),
            w2: self.push(format!("{p}.w2"), f, d, xavier(f, d)),
            b2: self.push(format!("{p}.b2"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = LayoutBuilder {
            specs: Vec::new(),
            d,
            d_ff: cfg.d_ff,
        };
        let embed = b.push("embed".into(), cfg.vocab_size, d, Init::Uniform((3.0 / d as f64).sqrt()));
        let encoder = (0..cfg.num_encoder_layers)
            .map(|l| EncoderLayerIdx {
                attn: b.attn(&format!("enc.{l}.self")),
                ln1: b.norm(&format!("enc.{l}.ln1")),
                ff: b.ff(&format!("enc.{l}.ff")),
                ln2: b.norm(&format!("enc.{l}.ln2")),
            })
            .collect();
        let decoder = (0..cfg.num_decoder_layers)
            .map(|l| DecoderLayerIdx {
                self_attn: b.attn(&format!("dec.{l}.self")),
                ln1: b.norm(&format!("dec.{l}.ln1")),
                cross: b.attn(&format!("dec.{l}.cross")),
                ln2: b.norm(&format!("dec.{l}.ln2")),
                ff: b.ff(&format!("dec.{l}.ff")),
                ln3: b.norm(&format!("dec.{l}.ln3")),
            })
            .collect();
        let out_w = b.push("out.w".into(), d, cfg.vocab_size, xavier(d, cfg.vocab_size));
        let out_b = b.push("out.b".into(), 1, cfg.vocab_size, Init::Zeros);
        Self {
            embed,
            encoder,
            decoder,
            out_w,
            out_b,
            specs: b.specs,
        }
    }
}

/// Named model tensors. Values produced by [`init_parameters`] and by the optimiser are
/// always exactly representable as `f32`, which is how checkpoints store them.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    config: ModelConfig,
    pub(crate) layout: Layout,
    tensors: Vec<Array2<F>>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs
    }
}

impl<F: Scalar> Parameters<F> {
    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Array2<F>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.specs.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&layout.specs) {
            if t.dim() != (s.rows, s.cols) {
                return Err(Error::shape(format!(
                    "tensor {} has shape {:?}, expected ({}, {})",
                    s.name,
                    t.dim(),
                    s.rows,
                    s.cols
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.layout
            .specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Element `k` of the parameters flattened in tensor order.
    pub fn flat_index(&self, mut k: usize) -> (usize, usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                let cols = t.ncols();
                return (i, k / cols, k % cols);
            }
            k -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|x| G::of(x.as_f64())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn zeros_like(&self) -> Gradients<F> {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }
}

/// Draws every weight from a centred uniform distribution (Xavier bounds for
/// projections, variance `1/d_model` for the embedding); layer-norm gains 1, biases 0.
pub fn init_parameters<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<F>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .specs
        .iter()
        .map(|s| match s.init {
            Init::Zeros => Array2::zeros((s.rows, s.cols)),
            Init::Ones => Array2::from_elem((s.rows, s.cols), F::one()),
            Init::Uniform(bound) => {
                let b = bound as f32;
                Array2::from_shape_simple_fn((s.rows, s.cols), || {
                    F::of(rng.gen_range(-b..b) as f64)
                })
            }
        })
        .collect();
    Ok(Parameters {
        config: config.clone(),
        layout,
        tensors,
    })
}

/// Gradient buffers laid out like [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub tensors: Vec<Array2<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * s);
        }
    }

    pub fn flat(&self, k: usize) -> F {
        let mut k = k;
        for t in &self.tensors {
            if k < t.len() {
                return t[(k / t.ncols(), k % t.ncols())];
            }
            k -= t.len();
        }
        panic!("flat gradient index out of range");
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| *x == F::zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::desk(20);
        let a: Parameters<f32> = init_parameters(&cfg, 7).unwrap();
        let b: Parameters<f32> = init_parameters(&cfg, 7).unwrap();
        let c: Parameters<f32> = init_parameters(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        assert!(a.get("dec.1.ln3.gain").unwrap().iter().all(|&x| x == 1.0));
        assert!(a.get("enc.0.ff.b1").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn f64_init_matches_f32_init() {
        let cfg = ModelConfig::desk(20);
        let a: Parameters<f32> = init_parameters(&cfg, 3).unwrap();
        let b: Parameters<f64> = init_parameters(&cfg, 3).unwrap();
        assert_eq!(a.cast::<f64>(), b);
    }

    #[test]
    fn rejects_inconsistent_head_width() {
        let mut cfg = ModelConfig::desk(20);
        cfg.d_k = 5;
        assert!(matches!(init_parameters::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn base_config_is_constructible() {
        let cfg = ModelConfig::base(17930);
        cfg.validate().unwrap();
        assert_eq!(Layout::new(&cfg).specs.len(), 1 + 6 * 16 + 6 * 26 + 2);
    }
}
