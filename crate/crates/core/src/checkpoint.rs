//! Weight checkpoint file.
//!
//! Layout: the magic `SNNCKPT1`, a little-endian `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in layer order (weight
//! before bias for each conv / fully-connected layer).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{QuantReport, Rounding};
use crate::spiking::{LayerParams, NetError, NetworkSpec, WeightSet};

pub const MAGIC: &[u8; 8] = b"SNNCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFormat {
    pub layer: usize,
    pub frac_bits: u32,
}

/// Quantization block of a quantized checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantHeader {
    pub bits: u32,
    pub rounding: Rounding,
    pub frac_bits: Vec<LayerFormat>,
}

impl From<&QuantReport> for QuantHeader {
    fn from(r: &QuantReport) -> Self {
        Self {
            bits: r.config.bits,
            rounding: r.config.rounding,
            frac_bits: r
                .layers
                .iter()
                .map(|l| LayerFormat {
                    layer: l.layer,
                    frac_bits: l.format.frac_bits,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkSpec,
    /// Precision tag, `"32b"` for unquantized weights.
    pub precision: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantHeader>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: WeightSet,
}

impl Checkpoint {
    pub fn new(network: NetworkSpec, weights: WeightSet, seed: u64, quant: Option<QuantHeader>) -> Result<Self, CheckpointError> {
        weights.check(&network)?;
        let mut tensors = Vec::new();
        for (i, layer) in network.layers.iter().enumerate() {
            if layer.is_spiking() {
                tensors.push(TensorEntry {
                    layer: i,
                    name: "weight".into(),
                    shape: layer.weight_shape(),
                });
                tensors.push(TensorEntry {
                    layer: i,
                    name: "bias".into(),
                    shape: vec![layer.out_channels],
                });
            }
        }
        let precision = format!("{}b", quant.as_ref().map_or(32, |q| q.bits));
        Ok(Self {
            header: CheckpointHeader {
                network,
                precision,
                seed,
                quant,
                tensors,
            },
            weights,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.header.network.weight_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.weights.params() {
            for v in p.weight.iter().chain(&p.bias) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(if bytes.starts_with(&MAGIC[..bytes.len().min(8)]) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let header_end = 12usize.checked_add(len).ok_or(CheckpointError::Truncated)?;
        let header_bytes = bytes.get(12..header_end).ok_or(CheckpointError::Truncated)?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        header.network.validate()?;

        let mut payload = bytes[header_end..].chunks_exact(4);
        let mut next = || -> Result<f64, CheckpointError> {
            let c = payload.next().ok_or(CheckpointError::Truncated)?;
            Ok(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        };
        let mut layers = Vec::with_capacity(header.network.layers.len());
        for layer in &header.network.layers {
            if !layer.is_spiking() {
                layers.push(None);
                continue;
            }
            let weight = (0..layer.weight_count()).map(|_| next()).collect::<Result<Vec<_>, _>>()?;
            let bias = (0..layer.out_channels).map(|_| next()).collect::<Result<Vec<_>, _>>()?;
            layers.push(Some(LayerParams { weight, bias }));
        }
        if bytes.len() != header_end + 4 * (header.network.weight_count() + header.network.bias_count()) {
            return Err(CheckpointError::BadHeader("payload length does not match network".into()));
        }
        let weights = WeightSet { layers };
        weights.check(&header.network)?;
        Ok(Self { header, weights })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spiking::build_network;

    #[test]
    fn round_trip_is_f32_exact() {
        let spec = build_network(50).unwrap();
        let w = WeightSet::init(&spec, 9);
        let ck = Checkpoint::new(spec, w.clone(), 9, None).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.header.precision, "32b");
        for ((_, a), (_, b)) in w.params().zip(back.weights.params()) {
            assert!(a.weight.iter().zip(&b.weight).all(|(x, y)| (*x as f32) as f64 == *y));
        }
        // re-encoding the decoded checkpoint is byte-identical
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_damaged_files() {
        let spec = build_network(50).unwrap();
        let ck = Checkpoint::new(spec.clone(), WeightSet::zeros(&spec), 0, None).unwrap();
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT...."), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::BadHeader(_))));
    }
}
