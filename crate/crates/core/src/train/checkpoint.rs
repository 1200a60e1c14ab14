//! Checkpoint file: `CHELA1`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor as little-endian `f32`.
//!
//! The manifest lists each tensor's name, shape, dtype and byte offset
//! within the payload, and echoes the model configuration, the data RNG
//! state and the step counter. Writes go to a temporary file that is renamed
//! into place.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChelaError, Result};
use crate::layer::{ChelaModel, ModelConfig, Params};
use crate::numerics::Tensor;

use super::optim::OptimState;

pub const MAGIC: &[u8; 6] = b"CHELA1";
const HEADER_FIXED: usize = MAGIC.len() + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub rng_state: u64,
    pub step: u64,
    /// Step counter of the optimizer, when its moments are stored.
    pub optim_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ChelaModel,
    pub optim: Option<OptimState>,
    pub rng_state: u64,
    pub step: u64,
}

fn moment_names(model: &ChelaModel) -> Vec<(String, String)> {
    model
        .params
        .named()
        .into_iter()
        .map(|(n, _)| (format!("adam.m.{n}"), format!("adam.v.{n}")))
        .collect()
}

fn f32_exact(name: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|&v| (v as f32) as f64 == v) {
        Ok(())
    } else {
        Err(ChelaError::NotF32(name.to_string()))
    }
}

/// Serializes a checkpoint to bytes. Every value must be exactly
/// representable in `f32`.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor)> = ck.model.params.named();
    if let Some(st) = &ck.optim {
        for (i, (m, v)) in moment_names(&ck.model).into_iter().enumerate() {
            named.push((m, &st.m[i]));
            named.push((v, &st.v[i]));
        }
    }
    let mut entries = Vec::with_capacity(named.len());
    let mut payload = Vec::new();
    for (name, t) in &named {
        f32_exact(name, t)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: payload.len(),
            nbytes: 4 * t.len(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: ck.model.config.clone(),
        rng_state: ck.rng_state,
        step: ck.step,
        optim_step: ck.optim.as_ref().map(|o| o.step),
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_FIXED + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| ChelaError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| ChelaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ChelaError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| ChelaError::io(path, e))
}

/// Splits a file into its manifest and payload, validating the framing.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ChelaError::BadMagic);
    }
    if bytes.len() < HEADER_FIXED {
        return Err(ChelaError::Truncated {
            needed: HEADER_FIXED,
            found: bytes.len(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[MAGIC.len()..HEADER_FIXED].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_FIXED..];
    if body.len() < hlen {
        return Err(ChelaError::Truncated {
            needed: HEADER_FIXED.saturating_add(hlen),
            found: bytes.len(),
        });
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..hlen]).map_err(|e| ChelaError::Manifest(e.to_string()))?;
    let payload = &body[hlen..];

    let mut expected_offset = 0usize;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(ChelaError::Manifest(format!("tensor {} has dtype {}, only f32 is stored", e.name, e.dtype)));
        }
        let need = e.shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d));
        if need != Some(e.nbytes) {
            return Err(ChelaError::OffsetMismatch {
                name: e.name.clone(),
                reason: format!("shape {:?} disagrees with {} bytes", e.shape, e.nbytes),
            });
        }
        if e.offset != expected_offset {
            return Err(ChelaError::OffsetMismatch {
                name: e.name.clone(),
                reason: format!("offset {} but previous tensors end at {expected_offset}", e.offset),
            });
        }
        expected_offset = expected_offset.saturating_add(e.nbytes);
    }
    if payload.len() < expected_offset {
        return Err(ChelaError::Truncated {
            needed: HEADER_FIXED.saturating_add(hlen).saturating_add(expected_offset),
            found: bytes.len(),
        });
    }
    if payload.len() > expected_offset {
        return Err(ChelaError::Manifest(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - expected_offset
        )));
    }
    Ok((manifest, payload))
}

fn read_tensor(e: &TensorEntry, payload: &[u8]) -> Result<Tensor> {
    let data: Vec<f64> = payload[e.offset..e.offset + e.nbytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ChelaError::NonFinite("checkpoint payload"));
    }
    Tensor::from_vec(&e.shape, data).map_err(|_| ChelaError::OffsetMismatch {
        name: e.name.clone(),
        reason: format!("invalid shape {:?}", e.shape),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = decode_manifest(bytes)?;
    manifest.config.validate().map_err(|e| ChelaError::Manifest(e.to_string()))?;
    let find = |name: &str| manifest.tensors.iter().find(|e| e.name == name);
    let mut model = ChelaModel::new(manifest.config.clone())?;
    let mut loaded = Vec::new();
    for (name, t) in model.params.named() {
        let e = find(&name).ok_or_else(|| ChelaError::Manifest(format!("missing tensor {name}")))?;
        if e.shape != t.shape() {
            return Err(ChelaError::TensorShape {
                name,
                expected: t.shape().to_vec(),
                found: e.shape.clone(),
            });
        }
        loaded.push(read_tensor(e, payload)?);
    }
    model.params.assign(&loaded)?;

    let optim = match manifest.optim_step {
        None => None,
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            let shapes: Vec<Vec<usize>> = model.params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
            for ((mn, vn), shape) in moment_names(&model).into_iter().zip(shapes) {
                for (name, dst) in [(mn, &mut m), (vn, &mut v)] {
                    let e = find(&name).ok_or_else(|| ChelaError::Manifest(format!("missing tensor {name}")))?;
                    if e.shape != shape {
                        return Err(ChelaError::TensorShape {
                            name,
                            expected: shape.clone(),
                            found: e.shape.clone(),
                        });
                    }
                    dst.push(read_tensor(e, payload)?);
                }
            }
            Some(OptimState { m, v, step })
        }
    };
    Ok(Checkpoint {
        model,
        optim,
        rng_state: manifest.rng_state,
        step: manifest.step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| ChelaError::io(path, e))?;
    decode_checkpoint(&bytes)
}
