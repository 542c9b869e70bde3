//! Binary checkpoint format.
//!
//! Layout: the magic `SPTCKPT1`, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use serde::{Deserialize, Serialize};
use spt_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{Result, SptError};
use crate::model::SptModel;

pub const MAGIC: &[u8; 8] = b"SPTCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 26;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config: RunConfig,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

pub fn encode(model: &SptModel, config: &RunConfig) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for e in model.params.entries() {
        tensors.push(TensorMeta {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset,
            trainable: e.trainable,
        });
        offset += e.value.numel();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in model.params.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let schema = |m: String| SptError::Schema(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(schema("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER || len > (bytes.len() - 16) as u64 {
        return Err(schema(format!("header length {len} out of range")));
    }
    let body = &bytes[16 + len as usize..];
    let header: Header = serde_json::from_slice(&bytes[16..16 + len as usize]).map_err(|e| schema(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(schema(format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if !body.len().is_multiple_of(8) {
        return Err(schema("data section is not a whole number of f64 values".into()));
    }
    let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut expected = 0usize;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let numel = meta
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| schema(format!("tensor {} has a bad shape {:?}", meta.name, meta.shape)))?;
        if meta.offset != expected || data.len() - expected < numel {
            return Err(schema(format!("tensor {} lies outside the data section", meta.name)));
        }
        tensors.push(Tensor::new(meta.shape.clone(), data[expected..expected + numel].to_vec())?);
        expected += numel;
    }
    if expected != data.len() {
        return Err(schema(format!("{} trailing values in data section", data.len() - expected)));
    }
    Ok(Checkpoint { header, tensors })
}

/// Whether two configs build the same parameter set. Training, data and
/// evaluation settings may differ.
pub fn same_architecture(a: &RunConfig, b: &RunConfig) -> bool {
    a.model == b.model && a.peft == b.peft && a.vra == b.vra && a.sdt == b.sdt
}

impl Checkpoint {
    /// Rebuilds the model described by the header and loads the weights.
    /// With `expect`, its architecture must equal the stored one.
    pub fn into_model(self, expect: Option<&RunConfig>) -> Result<SptModel> {
        if let Some(cfg) = expect {
            if !same_architecture(cfg, &self.header.config) {
                return Err(SptError::Schema("checkpoint was written for a different model configuration".into()));
            }
        }
        let mut model = SptModel::new(&self.header.config)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies the weights into `model`, whose parameter names, order and
    /// shapes must match the checkpoint.
    pub fn load_into(self, model: &mut SptModel) -> Result<()> {
        let ids: Vec<_> = model.params.ids().collect();
        if ids.len() != self.header.tensors.len() {
            return Err(SptError::Schema(format!(
                "checkpoint has {} tensors, model has {}",
                self.header.tensors.len(),
                ids.len()
            )));
        }
        for ((id, meta), value) in ids.into_iter().zip(&self.header.tensors).zip(self.tensors) {
            if model.params.name(id) != meta.name || model.params.is_trainable(id) != meta.trainable {
                return Err(SptError::Schema(format!("tensor {} does not match model parameter {}", meta.name, model.params.name(id))));
            }
            model.params.set(id, value)?;
        }
        Ok(())
    }
}

pub fn save(path: &std::path::Path, model: &SptModel, config: &RunConfig) -> Result<()> {
    std::fs::write(path, encode(model, config))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.image_size = 32;
        c.data.size = 32;
        c.model.encoder_depth = 1;
        c
    }

    #[test]
    fn round_trip() {
        let cfg = small();
        let mut model = SptModel::new(&cfg).unwrap();
        let id = model.params.trainable_ids()[0];
        model.params.value_mut(id).data_mut()[0] = 0.123;
        let bytes = encode(&model, &cfg);
        let back = decode(&bytes).unwrap().into_model(Some(&cfg)).unwrap();
        assert_eq!(back.params.checksum(|_| true), model.params.checksum(|_| true));
        assert_eq!(encode(&back, &cfg), bytes);
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let cfg = small();
        let model = SptModel::new(&cfg).unwrap();
        let bytes = encode(&model, &cfg);
        let mut other = cfg.clone();
        other.peft.rank = 4;
        assert!(matches!(decode(&bytes).unwrap().into_model(Some(&other)), Err(SptError::Schema(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 8]), Err(SptError::Schema(_))));
        assert!(matches!(decode(b"SPTCKPT0\0\0\0\0\0\0\0\0"), Err(SptError::Schema(_))));
        let mut wrong = SptModel::new(&other).unwrap();
        assert!(decode(&bytes).unwrap().load_into(&mut wrong).is_err());
    }
}
