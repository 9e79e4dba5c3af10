//! Versioned weight container: magic, format version, JSON manifest, then
//! little-endian `f64` tensors (generator section, then optional critic
//! section) in manifest order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::critic::{Critic, CriticConfig};
use crate::error::{Error, Result};
use crate::flownet::{Generator, GeneratorConfig, InterpMode};
use crate::nn::Module;

const MAGIC: &[u8; 8] = b"AXSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: u32,
    pub toolkit_version: String,
    pub generator: GeneratorConfig,
    pub generator_params: usize,
    pub student_params: usize,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticConfig>,
    #[serde(default)]
    pub critic_tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

pub struct Checkpoint {
    pub manifest: ModelManifest,
    pub generator: Generator,
    pub critic: Option<Critic>,
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn entries(m: &dyn Module) -> (Vec<TensorEntry>, Vec<Tensor>) {
    m.named_params()
        .into_iter()
        .map(|(name, v)| {
            (
                TensorEntry {
                    name,
                    shape: v.shape().to_vec(),
                },
                v.value().clone(),
            )
        })
        .unzip()
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[Tensor]) {
    for t in tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    generator: &Generator,
    critic: Option<&Critic>,
    config_hash: &str,
    epoch: Option<usize>,
) -> Result<ModelManifest> {
    let path = path.as_ref();
    let (tensors, gvals) = entries(generator);
    let (critic_tensors, cvals) = critic.map(|c| entries(c)).unwrap_or_default();
    let mut payload = Vec::new();
    write_tensors(&mut payload, &gvals);
    write_tensors(&mut payload, &cvals);
    let manifest = ModelManifest {
        format: FORMAT_VERSION,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        generator: generator.config().clone(),
        generator_params: generator.param_count(),
        student_params: generator.student_param_count(),
        config_hash: config_hash.to_string(),
        epoch,
        tensors,
        critic: critic.map(|c| c.config().clone()),
        critic_tensors,
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_section(entries: &[TensorEntry], data: &[u8], pos: &mut usize) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = *pos + n * 8;
        let chunk = data.get(*pos..end).ok_or_else(|| bad(format!("payload truncated in {}", e.name)))?;
        let vals: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(e.name.clone(), ArrayD::from_shape_vec(IxDyn(&e.shape), vals).unwrap());
        *pos = end;
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(ModelManifest, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("manifest truncated"))?;
    let manifest: ModelManifest = serde_json::from_slice(json)?;
    Ok((manifest, 20 + len))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (manifest, start) = read_manifest(&bytes)?;
    let payload = &bytes[start..];
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(bad("payload hash mismatch"));
    }
    let mut pos = 0;
    let gvals = read_section(&manifest.tensors, payload, &mut pos)?;
    let cvals = read_section(&manifest.critic_tensors, payload, &mut pos)?;
    if pos != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let mut generator = Generator::new(manifest.generator.clone())?;
    if generator.param_count() != manifest.generator_params {
        return Err(bad(format!(
            "manifest lists {} generator parameters, configuration builds {}",
            manifest.generator_params,
            generator.param_count()
        )));
    }
    generator.load_params(&gvals).map_err(bad)?;
    let critic = match &manifest.critic {
        Some(cfg) => {
            let mut c = Critic::new(cfg.clone())?;
            c.load_params(&cvals).map_err(bad)?;
            Some(c)
        }
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        generator,
        critic,
    })
}

/// Loads a generator and checks its interpolation mode.
pub fn load_generator(path: impl AsRef<Path>, mode: Option<InterpMode>) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if let Some(m) = mode {
        if ck.generator.mode() != m {
            return Err(Error::ModeMismatch(format!(
                "checkpoint is a {:?} model, {m:?} requested",
                ck.generator.mode()
            )));
        }
    }
    Ok(ck)
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::max_abs_diff;
    use ndarray::Array2;

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(GeneratorConfig::tiny(InterpMode::Fixed, 32)).unwrap();
        let c = Critic::new(CriticConfig::tiny(32)).unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &g, Some(&c), "abc", Some(3)).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.manifest.epoch, Some(3));
        assert_eq!(ck.manifest.config_hash, "abc");
        let a = Array2::from_shape_fn((32, 32), |(y, x)| ((y * x) % 7) as f64 / 7.0);
        let b = Array2::from_shape_fn((32, 32), |(y, x)| ((y + 2 * x) % 5) as f64 / 5.0);
        let before = g.predict(&[&a], &[&b], None).unwrap();
        let after = ck.generator.predict(&[&a], &[&b], None).unwrap();
        assert!(max_abs_diff(&before[0].clone().into_dyn(), &after[0].clone().into_dyn()) <= 1e-6);
        let x = ndarray::ArrayD::from_elem(IxDyn(&[1, 1, 32, 32]), 0.3);
        let s0 = c.forward(&crate::autograd::Var::constant(x.clone())).item();
        let s1 = ck.critic.unwrap().forward(&crate::autograd::Var::constant(x)).item();
        assert_eq!(s0, s1);
    }

    #[test]
    fn rejects_corruption_and_mode_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(GeneratorConfig::tiny(InterpMode::Fixed, 32)).unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &g, None, "h", None).unwrap();
        assert!(matches!(load_generator(&p, Some(InterpMode::Plus)), Err(Error::ModeMismatch(_))));
        assert!(load_generator(&p, Some(InterpMode::Fixed)).unwrap().critic.is_none());
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, b"nonsense").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
