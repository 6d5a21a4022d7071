//! Checkpointing: named parameter groups plus the run configuration and
//! RNG position, stored as a JSON manifest next to one contiguous
//! little-endian f32 blob. Saving, loading, and re-saving is byte-identical.

use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::params::Params;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

/// Resumable position of a deterministic stream: the 256-bit seed plus the
/// stream's word offset, both hex-encoded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos_hex: String,
}

impl RngState {
    pub fn capture(rng: &RngStream) -> Self {
        RngState {
            seed_hex: hex_encode(&rng.get_seed()),
            word_pos_hex: format!("{:x}", rng.get_word_pos()),
        }
    }

    pub fn restore(&self) -> Result<RngStream, CheckpointError> {
        let seed = hex_decode(&self.seed_hex)?;
        if seed.len() != 32 {
            return Err(CheckpointError::Format(format!(
                "rng seed must be 32 bytes, got {}",
                seed.len()
            )));
        }
        let mut key = [0u8; 32];
        key.copy_from_slice(&seed);
        let mut rng = RngStream::from_seed(key);
        let pos = u128::from_str_radix(&self.word_pos_hex, 16)
            .map_err(|e| CheckpointError::Format(format!("bad rng word position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>, CheckpointError> {
    if s.len() % 2 != 0 {
        return Err(CheckpointError::Format("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|e| CheckpointError::Format(format!("bad hex byte: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the blob (not bytes).
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct GroupEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    format_version: u32,
    step: u64,
    config: RunConfig,
    rng: RngState,
    groups: Vec<GroupEntry>,
    blob_elements: usize,
}

const FORMAT_VERSION: u32 = 1;

/// In-memory checkpoint: ordered, named parameter groups (for example
/// "query" and "key" during pretraining, or a single "model" group).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub rng: RngState,
    pub groups: Vec<(String, Params)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&Params> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// Writes `<prefix>.json` and `<prefix>.bin`. Values are stored as f32;
    /// loading widens back to f64, so a save/load/save cycle is stable.
    pub fn save(&self, prefix: &Path) -> Result<(), CheckpointError> {
        let mut groups = Vec::with_capacity(self.groups.len());
        let mut blob = Vec::new();
        for (gname, params) in &self.groups {
            let mut tensors = Vec::with_capacity(params.len());
            for (name, t) in params.iter() {
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset: blob.len(),
                });
                blob.extend(t.data().iter().map(|&v| v as f32));
            }
            groups.push(GroupEntry {
                name: gname.clone(),
                tensors,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            groups,
            blob_elements: blob.len(),
        };
        let mut bytes = vec![0u8; blob.len() * 4];
        LittleEndian::write_f32_into(&blob, &mut bytes);
        write_atomic(&prefix.with_extension("bin"), &bytes)?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&prefix.with_extension("json"), &json)?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self, CheckpointError> {
        let json_path = prefix.with_extension("json");
        let text = std::fs::read(&json_path).map_err(|e| CheckpointError::Io {
            path: json_path,
            source: e,
        })?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let bin_path = prefix.with_extension("bin");
        let bytes = std::fs::read(&bin_path).map_err(|e| CheckpointError::Io {
            path: bin_path,
            source: e,
        })?;
        if bytes.len() != manifest.blob_elements * 4 {
            return Err(CheckpointError::Format(format!(
                "blob holds {} bytes, manifest expects {}",
                bytes.len(),
                manifest.blob_elements * 4
            )));
        }
        let mut blob = vec![0f32; manifest.blob_elements];
        LittleEndian::read_f32_into(&bytes, &mut blob);
        let mut groups = Vec::with_capacity(manifest.groups.len());
        for g in &manifest.groups {
            let mut params = Params::new();
            for t in &g.tensors {
                let numel: usize = t.shape.iter().product();
                let end = t.offset.checked_add(numel).filter(|&e| e <= blob.len());
                let Some(end) = end else {
                    return Err(CheckpointError::Format(format!(
                        "tensor {} overruns the blob",
                        t.name
                    )));
                };
                let data: Vec<f64> = blob[t.offset..end].iter().map(|&v| v as f64).collect();
                let tensor = Tensor::new(t.shape.clone(), data)
                    .map_err(|e| CheckpointError::Format(e.to_string()))?;
                params.push(&t.name, tensor);
            }
            groups.push((g.name.clone(), params));
        }
        Ok(Checkpoint {
            step: manifest.step,
            config: manifest.config,
            rng: manifest.rng,
            groups,
        })
    }
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    let io = |source: std::io::Error, p: &Path| CheckpointError::Io {
        path: p.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(&tmp).map_err(|e| io(e, &tmp))?;
    f.write_all(bytes).map_err(|e| io(e, &tmp))?;
    f.sync_all().map_err(|e| io(e, &tmp))?;
    std::fs::rename(&tmp, path).map_err(|e| io(e, path))?;
    Ok(())
}
