//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::moe::pairing::PairedExpertSpec;
use crate::params::ParamTree;

pub const FORMAT: &str = "modse-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub step: usize,
    pub config: ModelConfig,
    pub spec: PairedExpertSpec,
    pub expert_sizes: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model<f32>, step: usize) -> Result<Vec<u8>> {
    let tensors = model.tensors();
    let header = CheckpointHeader {
        format: FORMAT.into(),
        step,
        config: model.cfg.clone(),
        spec: model.spec.clone(),
        expert_sizes: model.spec.expert_sizes.clone(),
        tensors: model
            .param_names()
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.param_count());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, CheckpointHeader)> {
    let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated length prefix"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format {:?}", header.format)));
    }
    let mut model = Model::<f32>::init(&header.config)?;
    if model.spec != header.spec {
        return Err(bad("expert spec does not match config"));
    }
    let mut data = &bytes[8 + hlen..];
    let mut tensors = model.tensors_mut();
    if tensors.len() != header.tensors.len() {
        return Err(bad("tensor count mismatch"));
    }
    for (t, entry) in tensors.iter_mut().zip(&header.tensors) {
        if t.shape() != entry.shape.as_slice() {
            return Err(bad(&format!("shape mismatch for {}", entry.name)));
        }
        let n = t.numel() * 4;
        if data.len() < n {
            return Err(bad(&format!("truncated data for {}", entry.name)));
        }
        for (v, chunk) in t.values_mut().iter_mut().zip(data[..n].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    drop(tensors);
    Ok((model, header))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save(model: &Model<f32>, step: usize, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model, step)?)
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::pairing::ExpertRatios;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            n_experts: 4,
            top_k: 2,
            h_base: 16,
            expert_ratios: "3:1,1.5:2.5".parse::<ExpertRatios>().unwrap(),
            seq_len: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Model::<f32>::init(&tiny()).unwrap();
        let bytes = to_bytes(&m, 3).unwrap();
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(header.step, 3);
        assert_eq!(header.expert_sizes, vec![24, 8, 20, 12]);
        for (a, b) in m.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.values(), b.values());
        }
        assert_eq!(to_bytes(&back, 3).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_reported() {
        let m = Model::<f32>::init(&tiny()).unwrap();
        let bytes = to_bytes(&m, 0).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(&bytes[..4]).is_err());
    }
}
