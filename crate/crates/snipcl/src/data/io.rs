//! Dataset directory format: `manifest.json` plus one `<id>.f32` blob per
//! sequence of exactly T*J*3 little-endian 32-bit floats, frame-major then
//! joint-major then xyz.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{SegmentAnnotation, SkeletonSequence};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestSegment {
    class: usize,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestSequence {
    id: String,
    t: usize,
    /// Run-length encoded frame labels: [label, run length] pairs.
    label_run_lengths: Vec<[usize; 2]>,
    segments: Vec<ManifestSegment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    fps: f64,
    j: usize,
    sequences: Vec<ManifestSequence>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<(SkeletonSequence, Vec<SegmentAnnotation>)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn rle_encode(labels: &[usize]) -> Vec<[usize; 2]> {
    let mut out: Vec<[usize; 2]> = Vec::new();
    for &l in labels {
        match out.last_mut() {
            Some(run) if run[0] == l => run[1] += 1,
            _ => out.push([l, 1]),
        }
    }
    out
}

fn rle_decode(runs: &[[usize; 2]]) -> Vec<usize> {
    let mut out = Vec::new();
    for &[label, len] in runs {
        out.extend(std::iter::repeat(label).take(len));
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| DatasetError::Io {
        path: tmp.clone(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| DatasetError::Io {
        path: tmp.clone(),
        source: e,
    })?;
    fs::rename(&tmp, path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let fps = dataset.items.first().map_or(30.0, |(s, _)| s.fps);
    let j = dataset.items.first().map_or(0, |(s, _)| s.j());
    let mut sequences = Vec::with_capacity(dataset.len());
    for (i, (seq, segs)) in dataset.items.iter().enumerate() {
        let id = format!("seq_{i:05}");
        let mut bytes = vec![0u8; seq.joints.numel() * 4];
        for (k, v) in seq.joints.data().iter().enumerate() {
            LittleEndian::write_f32(&mut bytes[k * 4..], *v as f32);
        }
        write_atomic(&dir.join(format!("{id}.f32")), &bytes)?;
        sequences.push(ManifestSequence {
            id,
            t: seq.t(),
            label_run_lengths: rle_encode(&seq.frame_labels),
            segments: segs
                .iter()
                .map(|s| ManifestSegment {
                    class: s.class_id,
                    start: s.start,
                    end: s.end,
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        fps,
        j,
        sequences,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialization");
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(|e| DatasetError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| DatasetError::Format {
            path: manifest_path.clone(),
            detail: e.to_string(),
        })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::Format {
            path: manifest_path.clone(),
            detail: format!("unsupported version {}", manifest.version),
        });
    }
    let mut items = Vec::with_capacity(manifest.sequences.len());
    for ms in &manifest.sequences {
        let blob_path = dir.join(format!("{}.f32", ms.id));
        let bytes = fs::read(&blob_path).map_err(|e| DatasetError::Io {
            path: blob_path.clone(),
            source: e,
        })?;
        let expected = ms.t * manifest.j * 3 * 4;
        if bytes.len() != expected {
            return Err(DatasetError::Format {
                path: blob_path.clone(),
                detail: format!(
                    "blob length mismatch at offset {}: expected {expected} bytes, got {}",
                    bytes.len().min(expected),
                    bytes.len()
                ),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(LittleEndian::read_f32(c)))
            .collect();
        let labels = rle_decode(&ms.label_run_lengths);
        if labels.len() != ms.t {
            return Err(DatasetError::Format {
                path: manifest_path.clone(),
                detail: format!(
                    "sequence {}: label run lengths sum to {}, expected {}",
                    ms.id,
                    labels.len(),
                    ms.t
                ),
            });
        }
        items.push((
            SkeletonSequence {
                joints: Tensor::new(vec![ms.t, manifest.j, 3], data).map_err(|e| {
                    DatasetError::Format {
                        path: blob_path.clone(),
                        detail: e.to_string(),
                    }
                })?,
                frame_labels: labels,
                fps: manifest.fps,
            },
            ms.segments
                .iter()
                .map(|s| SegmentAnnotation {
                    class_id: s.class,
                    start: s.start,
                    end: s.end,
                })
                .collect(),
        ));
    }
    Ok(Dataset { items })
}
