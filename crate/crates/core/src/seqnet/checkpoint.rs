//! Versioned JSON checkpoints: the model config plus every parameter tensor
//! as base64 of little-endian f64 bytes.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqnet::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub parameter_count: usize,
    pub tensors: Vec<TensorEntry>,
}

pub(crate) fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub(crate) fn decode_f64(data: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(data).map_err(|e| Error::Checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("payload of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

impl Checkpoint {
    pub fn from_model(m: &ModelParams) -> Self {
        let tensors = m
            .tensors()
            .into_iter()
            .map(|(name, (r, c), v)| TensorEntry { name, shape: [r, c], data: encode_f64(v) })
            .collect();
        Self { version: CHECKPOINT_VERSION, config: m.config.clone(), parameter_count: m.parameter_count(), tensors }
    }

    pub fn to_model(&self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut m = ModelParams::zeros(&self.config)?;
        let expected: Vec<(String, (usize, usize))> = m.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} tensors, checkpoint has {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((dst, (name, shape)), entry) in m.tensors_mut().into_iter().zip(&expected).zip(&self.tensors) {
            if &entry.name != name || entry.shape != [shape.0, shape.1] {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let values = decode_f64(&entry.data)?;
            if values.len() != dst.len() {
                return Err(Error::Checkpoint(format!("tensor {name} has {} values, expected {}", values.len(), dst.len())));
            }
            dst.copy_from_slice(&values);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        for cfg in [ModelConfig::lstm(4, 2, 5, 0.1), ModelConfig::transformer(4, 2, 3, 2, 6, 0.1)] {
            let mut m = ModelParams::init(&cfg, 17).unwrap();
            m.head.bias[0] = f64::MIN_POSITIVE / 3.0;
            let json = serde_json::to_string(&Checkpoint::from_model(&m)).unwrap();
            let back: Checkpoint = serde_json::from_str(&json).unwrap();
            let m2 = back.to_model().unwrap();
            let bits = |m: &ModelParams| -> Vec<u64> {
                m.tensors().iter().flat_map(|t| t.2.iter().map(|v| v.to_bits())).collect()
            };
            assert_eq!(bits(&m), bits(&m2));
            assert_eq!(m.config, m2.config);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = ModelParams::init(&ModelConfig::lstm(2, 1, 3, 0.0), 0).unwrap();
        let mut c = Checkpoint::from_model(&m);
        c.version = 99;
        assert!(c.to_model().is_err());
        let mut c = Checkpoint::from_model(&m);
        c.tensors[0].data = encode_f64(&[1.0]);
        assert!(c.to_model().is_err());
        let mut c = Checkpoint::from_model(&m);
        c.tensors.pop();
        assert!(c.to_model().is_err());
    }
}
