//! Checkpoint directories: `manifest.json` plus one little-endian f64 file
//! per parameter, in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GoseParams, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::sha256_hex;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "gose-ckpt/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 over all tensor files concatenated in manifest order.
    pub content_hash: String,
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_tensor(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * 8 {
        return Err(Error::Validation(format!(
            "tensor of shape {shape:?} needs {} bytes, found {}",
            numel * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Parse and structurally validate a manifest (version, config, tensor
/// list against the config's shape table).
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        location: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint version `{}` (expected `{CHECKPOINT_VERSION}`)",
            m.version
        )));
    }
    m.config.validate()?;
    let shapes = GoseParams::shapes(&m.config);
    if m.tensors.len() != GoseParams::NAMES.len() {
        return Err(Error::Validation(format!(
            "manifest lists {} tensors, expected {}",
            m.tensors.len(),
            GoseParams::NAMES.len()
        )));
    }
    for ((entry, name), shape) in m.tensors.iter().zip(GoseParams::NAMES).zip(&shapes) {
        if entry.name != *name || &entry.shape != shape {
            return Err(Error::Validation(format!(
                "manifest entry `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::Validation(format!(
                "tensor file name `{}` must be a plain file name",
                entry.file
            )));
        }
    }
    Ok(m)
}

fn build(params: &GoseParams, cfg: &ModelConfig) -> Result<(Manifest, Vec<Vec<u8>>)> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let blobs: Vec<Vec<u8>> = params.tensors().into_iter().map(encode_tensor).collect();
    let tensors = GoseParams::NAMES
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file: format!("{name}.bin"),
        })
        .collect();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.into(),
        config: cfg.clone(),
        tensors,
        content_hash: sha256_hex(&blobs.concat()),
    };
    Ok((manifest, blobs))
}

/// Write a checkpoint into `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, params: &GoseParams, cfg: &ModelConfig) -> Result<Manifest> {
    let (manifest, blobs) = build(params, cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, blob) in manifest.tensors.iter().zip(&blobs) {
        let path = dir.join(&entry.file);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(GoseParams, ModelConfig)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = parse_manifest(&text)?;
    let mut blobs = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        blobs.push(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    let params = decode_params(&manifest, &blobs)?;
    Ok((params, manifest.config))
}

/// Tensors from raw file contents, verifying sizes and the content hash.
pub fn decode_params(manifest: &Manifest, blobs: &[Vec<u8>]) -> Result<GoseParams> {
    if blobs.len() != manifest.tensors.len() {
        return Err(Error::Validation("tensor file count does not match manifest".into()));
    }
    let hash = sha256_hex(&blobs.concat());
    if hash != manifest.content_hash {
        return Err(Error::Validation(format!(
            "content hash mismatch: manifest {}, files {hash}",
            manifest.content_hash
        )));
    }
    let tensors = manifest
        .tensors
        .iter()
        .zip(blobs)
        .map(|(entry, blob)| decode_tensor(blob, &entry.shape))
        .collect::<Result<Vec<_>>>()?;
    GoseParams::from_tensors(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_h: 6,
            vocab_size: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = GoseParams::init(&cfg(), 4).unwrap();
        p.w_q.data_mut()[0] = -0.0;
        p.w_q.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        save_checkpoint(dir.path(), &p, &cfg()).unwrap();
        let (q, c) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c, cfg());
        for (a, b) in p.tensors().into_iter().zip(q.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn resave_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let p = GoseParams::init(&cfg(), 9).unwrap();
        save_checkpoint(a.path(), &p, &cfg()).unwrap();
        let (q, c) = load_checkpoint(a.path()).unwrap();
        save_checkpoint(b.path(), &q, &c).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), GoseParams::NAMES.len() + 1);
        for name in names {
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = GoseParams::init(&cfg(), 1).unwrap();
        save_checkpoint(dir.path(), &p, &cfg()).unwrap();
        let path = dir.path().join("w_k.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Validation(_))));
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn manifest_rejects_bad_entries() {
        let p = GoseParams::init(&cfg(), 1).unwrap();
        let (m, _) = build(&p, &cfg()).unwrap();
        let good = serde_json::to_string(&m).unwrap();
        parse_manifest(&good).unwrap();
        assert!(parse_manifest(&good.replace("gose-ckpt/1", "gose-ckpt/9")).is_err());
        assert!(parse_manifest(&good.replace("\"w_k.bin\"", "\"../w_k.bin\"")).is_err());
        assert!(parse_manifest(&good.replace("\"d_h\":6", "\"d_h\":12")).is_err());
        assert!(matches!(parse_manifest("{\"version\": 3}"), Err(Error::Parse { .. })));
    }
}
