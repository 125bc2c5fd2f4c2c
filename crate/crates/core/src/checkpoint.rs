//! Versioned binary checkpoints: magic, format version, a JSON config block,
//! then named float32 tensors in lexicographic name order. Writes go through
//! a temp file plus rename so a crash never leaves a torn checkpoint behind.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MAESTRO\0";
const VERSION: u32 = 1;

/// Hex digest of the canonical JSON form of a config, embedded in reports so
/// runs can be traced back to their settings.
pub fn config_hash<C: serde::Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint<F: Scalar, C: serde::Serialize>(
    path: &Path,
    config: &C,
    params: &ParamSet<F>,
) -> Result<()> {
    let config_json = serde_json::to_vec(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(params.tensor_count() as u64).to_le_bytes());
    // ParamSet iterates in name order already
    for (name, tensor) in params.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for &v in tensor.data() {
            let f = v.to_f32().ok_or_else(|| {
                Error::CheckpointFormat(format!("{name}: value not representable as f32"))
            })?;
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar, C: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<(C, ParamSet<F>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let config: C = serde_json::from_slice(cur.take(cfg_len)?)?;
    let n_params = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let mut params = ParamSet::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..n_params {
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::CheckpointFormat("non-UTF8 tensor name".into()))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::CheckpointFormat(format!(
                    "tensor names out of order: {prev} then {name}"
                )));
            }
        }
        let rows = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let raw = cur.take(rows * cols * 4)?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
            .collect();
        params.insert(&name, Tensor::from_vec(rows, cols, data)?);
        prev_name = Some(name);
    }
    if cur.pos != bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok((config, params))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{GeneratorConfig, GeneratorModel};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = GeneratorConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn: 32,
            ..GeneratorConfig::default()
        };
        let model = GeneratorModel::<f32>::new(cfg.clone(), 3).unwrap();
        save_checkpoint(&path, &cfg, &model.params).unwrap();
        let (cfg2, params2): (GeneratorConfig, _) = load_checkpoint::<f32, _>(&path).unwrap();
        assert_eq!(serde_json::to_string(&cfg).unwrap(), serde_json::to_string(&cfg2).unwrap());
        assert_eq!(model.params.count(), params2.count());
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(params2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
    }

    #[test]
    fn corrupted_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = GeneratorConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn: 32,
            ..GeneratorConfig::default()
        };
        let model = GeneratorModel::<f32>::new(cfg.clone(), 3).unwrap();
        save_checkpoint(&path, &cfg, &model.params).unwrap();
        let good = std::fs::read(&path).unwrap();

        // bad magic
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint::<f32, GeneratorConfig>(&path).is_err());

        // truncation
        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(load_checkpoint::<f32, GeneratorConfig>(&path).is_err());

        // wrong version
        let mut bad = good.clone();
        bad[8] = 99;
        std::fs::write(&path, &bad).unwrap();
        let err = load_checkpoint::<f32, GeneratorConfig>(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn no_temp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = GeneratorConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn: 32,
            ..GeneratorConfig::default()
        };
        let model = GeneratorModel::<f32>::new(cfg.clone(), 3).unwrap();
        save_checkpoint(&path, &cfg, &model.params).unwrap();
        assert!(path.exists());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn config_hash_stable_and_sensitive() {
        let a = GeneratorConfig::default();
        let mut b = GeneratorConfig::default();
        b.hidden += 1;
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}
