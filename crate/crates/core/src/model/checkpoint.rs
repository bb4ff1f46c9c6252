//! Self-describing tensor container.
//!
//! ```text
//! NDCKPT 1
//! key=value            (any number of metadata lines)
//! tensor <name> <rows> <cols>
//! ...
//! end
//! <rows*cols little-endian f32 per tensor, in header order>
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{ModelConfig, Parameters, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "NDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .ok_or_else(|| bad(format!("missing header key {key}")))?
            .parse()
            .map_err(|_| bad(format!("header key {key} has an invalid value")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k.starts_with("tensor ") || k == "end" {
                return Err(bad(format!("metadata key {k:?} cannot be stored")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) || name.is_empty() {
                return Err(bad(format!("tensor name {name:?} cannot be stored")));
            }
            header.push_str(&format!("tensor {name} {} {}\n", t.nrows(), t.ncols()));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, t) in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            Ok(line.to_string())
        };
        let first = next_line()?;
        let version = first
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut meta = Vec::new();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                let [name, rows, cols] = f[..] else {
                    return Err(bad(format!("malformed tensor line {line:?}")));
                };
                let rows: usize = rows.parse().map_err(|_| bad("bad tensor rows"))?;
                let cols: usize = cols.parse().map_err(|_| bad("bad tensor cols"))?;
                shapes.push((name.to_string(), rows, cols));
            } else if let Some((k, v)) = line.split_once('=') {
                meta.push((k.to_string(), v.to_string()));
            } else {
                return Err(bad(format!("malformed header line {line:?}")));
            }
        }
        let mut data = &bytes[pos..];
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            if data.len() < 4 * n {
                return Err(bad(format!("tensor {name} is truncated")));
            }
            let values: Vec<f32> = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            data = &data[4 * n..];
            let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
            tensors.push((name, t));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl ModelConfig {
    pub(crate) fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("model.num_encoder_layers".into(), self.num_encoder_layers.to_string()),
            ("model.num_decoder_layers".into(), self.num_decoder_layers.to_string()),
            ("model.num_heads".into(), self.num_heads.to_string()),
            ("model.d_model".into(), self.d_model.to_string()),
            ("model.d_ff".into(), self.d_ff.to_string()),
            ("model.d_k".into(), self.d_k.to_string()),
            ("model.vocab_size".into(), self.vocab_size.to_string()),
            ("model.max_sequence_length".into(), self.max_sequence_length.to_string()),
            ("model.dropout_rate".into(), format!("{:?}", self.dropout_rate)),
        ]
    }

    pub(crate) fn from_meta(c: &Container) -> Result<Self> {
        Ok(Self {
            num_encoder_layers: c.parse_meta("model.num_encoder_layers")?,
            num_decoder_layers: c.parse_meta("model.num_decoder_layers")?,
            num_heads: c.parse_meta("model.num_heads")?,
            d_model: c.parse_meta("model.d_model")?,
            d_ff: c.parse_meta("model.d_ff")?,
            d_k: c.parse_meta("model.d_k")?,
            vocab_size: c.parse_meta("model.vocab_size")?,
            max_sequence_length: c.parse_meta("model.max_sequence_length")?,
            dropout_rate: c.parse_meta("model.dropout_rate")?,
        })
    }
}

impl<F: Scalar> Parameters<F> {
    /// Header with the model config plus every tensor narrowed to `f32`.
    pub fn to_container(&self) -> Container {
        Container {
            meta: self.config().to_meta(),
            tensors: self
                .specs()
                .iter()
                .zip(self.tensors())
                .map(|(s, t)| (s.name.clone(), t.mapv(|x| x.as_f64() as f32)))
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig::from_meta(c)?;
        let layout = super::params::Layout::new(&config);
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                c.tensor(&s.name)
                    .map(|t| t.mapv(|x| F::of(x as f64)))
                    .ok_or_else(|| bad(format!("missing tensor {}", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Parameters::from_tensors(config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    #[test]
    fn parameters_round_trip_bitwise() {
        let p: Parameters<f32> = init_parameters(&ModelConfig::desk(30), 5).unwrap();
        let bytes = p.to_container().to_bytes().unwrap();
        let back = Parameters::<f32>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config(), p.config());
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_is_plain_text() {
        let p: Parameters<f32> = init_parameters(&ModelConfig::desk(10), 5).unwrap();
        let bytes = p.to_container().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("NDCKPT 1\nmodel.num_encoder_layers=2\n"));
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let p: Parameters<f32> = init_parameters(&ModelConfig::desk(10), 5).unwrap();
        let bytes = p.to_container().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"PK\x03\x04").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }
}
