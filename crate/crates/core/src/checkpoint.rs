//! Checkpoint files: a u32-length-prefixed JSON config, a u32-length-prefixed
//! JSON manifest of `(name, shape)` pairs in parameter order, then every
//! tensor as little-endian f32, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::ByteReader;
use crate::error::{FormatError, Result};
use crate::nn::{ParamTree, ParamsExt};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub config_json: Vec<u8>,
    pub manifest: Vec<ManifestEntry>,
    pub data: Vec<f32>,
}

pub fn encode<C: Serialize, P: ParamTree<f32>>(config: &C, params: &P) -> Vec<u8> {
    let cfg = serde_json::to_vec(config).expect("config serialises");
    let named = params.named();
    let manifest: Vec<ManifestEntry> = named
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let manifest = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::new();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in named {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint, FormatError> {
    let mut r = ByteReader::new(bytes);
    let n = r.u32()? as usize;
    let config_json = r.take(n)?.to_vec();
    let n = r.u32()? as usize;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(r.take(n)?).map_err(|e| FormatError::Metadata(e.to_string()))?;
    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let data = r.f32s(total)?;
    if r.remaining() != 0 {
        return Err(FormatError::Inconsistent(format!(
            "{} trailing bytes after tensors",
            r.remaining()
        )));
    }
    Ok(RawCheckpoint {
        config_json,
        manifest,
        data,
    })
}

impl RawCheckpoint {
    pub fn config<C: DeserializeOwned>(&self) -> Result<C, FormatError> {
        serde_json::from_slice(&self.config_json).map_err(|e| FormatError::Metadata(e.to_string()))
    }

    /// Copies tensors into `params`, whose names and shapes must match the
    /// manifest exactly.
    pub fn load_into<P: ParamTree<f32>>(&self, params: &mut P) -> Result<(), FormatError> {
        let expected: Vec<ManifestEntry> = params
            .named()
            .into_iter()
            .map(|(name, t)| ManifestEntry {
                name,
                shape: t.shape.clone(),
            })
            .collect();
        if expected != self.manifest {
            let first = expected
                .iter()
                .zip(&self.manifest)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("{} vs {} tensors", expected.len(), self.manifest.len()));
            return Err(FormatError::Inconsistent(format!("manifest mismatch: {first}")));
        }
        let mut off = 0;
        for t in params.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&self.data[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

pub fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    Ok(decode(&fs::read(path)?)?)
}
