//! `DIMC` checkpoints.
//!
//! Layout (little-endian): `b"DIMC"`, format version `u16`, manifest length
//! `u32`, manifest as UTF-8 JSON, record count `u32`, then per record a `u32`
//! name length, the UTF-8 name and one `DIMT` tensor in f64. Record names are
//! `model.*`, `ema.*`, `adam_m.*` and `adam_v.*`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DimError, Result};
use crate::model::{build_model, DimModel, ModelConfig};
use crate::numerics::{read_tensor, write_tensor, DType, Rng, RngState, Tensor};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIMC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: u64,
    /// Run configuration text the checkpoint was trained with.
    pub config: String,
    pub model: ModelConfig,
    /// Training RNG after `step` steps.
    pub rng: RngState,
    /// `latent`, `image` or `video`.
    pub data_kind: String,
    pub ema_decay: Option<f64>,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: DimModel,
    pub ema: Option<DimModel>,
    /// Adam first and second moments.
    pub moments: Option<(DimModel, DimModel)>,
}

fn put_records(out: &mut Vec<(String, Tensor)>, prefix: &str, p: &DimModel) {
    for (name, t) in p.named_params() {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    put_records(&mut records, "model", &ck.model);
    if let Some(e) = &ck.ema {
        put_records(&mut records, "ema", e);
    }
    if let Some((m, v)) = &ck.moments {
        put_records(&mut records, "adam_m", m);
        put_records(&mut records, "adam_v", v);
    }
    let manifest = serde_json::to_vec(&ck.manifest).map_err(|e| DimError::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in &records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t, DType::F64)?;
    }
    Ok(out)
}

/// Writes via a temporary file and rename so readers never see a partial
/// checkpoint.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn fill(records: &mut BTreeMap<String, Tensor>, prefix: &str, cfg: &ModelConfig) -> Result<Option<DimModel>> {
    if !records.keys().any(|k| k.starts_with(&format!("{prefix}."))) {
        return Ok(None);
    }
    let mut model = build_model(cfg, &mut Rng::new(0))?;
    let mut err = None;
    model.visit_mut("", &mut |name, t| {
        let key = format!("{prefix}.{name}");
        match records.remove(&key) {
            Some(src) if src.shape() == t.shape() => *t = src,
            Some(src) => {
                err.get_or_insert(DimError::Format(format!(
                    "record {key} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            None => {
                err.get_or_insert(DimError::Format(format!("checkpoint is missing {key}")));
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(Some(model)),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DimError::Format("not a DIMC checkpoint".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(DimError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = read_u32(&mut r)? as usize;
    if mlen > r.len() {
        return Err(DimError::Format("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&r[..mlen]).map_err(|e| DimError::Format(format!("manifest: {e}")))?;
    r = &r[mlen..];
    let count = read_u32(&mut r)?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        if nlen > r.len() {
            return Err(DimError::Format("truncated record name".into()));
        }
        let name = std::str::from_utf8(&r[..nlen])
            .map_err(|_| DimError::Format("record name is not UTF-8".into()))?
            .to_string();
        r = &r[nlen..];
        records.insert(name, read_tensor(&mut r)?);
    }
    let cfg = &manifest.model;
    let model = fill(&mut records, "model", cfg)?
        .ok_or_else(|| DimError::Format("checkpoint has no model weights".into()))?;
    let ema = fill(&mut records, "ema", cfg)?;
    let m = fill(&mut records, "adam_m", cfg)?;
    let v = fill(&mut records, "adam_v", cfg)?;
    if let Some(extra) = records.keys().next() {
        return Err(DimError::Format(format!("unexpected record {extra}")));
    }
    Ok(Checkpoint {
        manifest,
        model,
        ema,
        moments: m.zip(v),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| DimError::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::jitter;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::micro(1, 8, 2, [1, 4, 4, 1], 2);
        cfg.time_freq_dim = 4;
        let mut rng = Rng::new(3);
        let mut model = build_model(&cfg, &mut rng).unwrap();
        jitter(&mut model, &mut rng, 0.1);
        let mut ema = model.clone();
        jitter(&mut ema, &mut rng, 0.1);
        let m = model.zeros_like();
        let mut v = model.zeros_like();
        jitter(&mut v, &mut rng, 1e-3);
        rng.next_u64();
        Checkpoint {
            manifest: Manifest {
                step: 12,
                config: "[run]\nseed = 3\n".into(),
                model: cfg,
                rng: rng.state(),
                data_kind: "latent".into(),
                ema_decay: Some(0.999),
                optimizer_step: 12,
            },
            model,
            ema: Some(ema),
            moments: Some((m, v)),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(&bytes[..4], b"DIMC");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let mut restored = Rng::from_state(&back.manifest.rng).unwrap();
        let mut orig = Rng::from_state(&ck.manifest.rng).unwrap();
        assert_eq!(restored.next_u64(), orig.next_u64());
    }

    #[test]
    fn optional_parts_and_corruption() {
        let mut ck = sample();
        ck.ema = None;
        ck.moments = None;
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert!(back.ema.is_none() && back.moments.is_none());
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dimc");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
