//! On-disk dataset layout.
//!
//! ```text
//! <dir>/index.json            labels, clip durations, optional ground truth
//! <dir>/features/<bag_id>.bin one file per bag
//! ```
//!
//! A feature file is a 16-byte header holding `T` and `d` as little-endian
//! `u64`, followed by `T * d` little-endian `f32` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mil::{Bag, BagLabel, Dataset, FeatureSequence, Segment};
use crate::numerics::DenseMatrix;

pub const INDEX_FILE: &str = "index.json";
pub const FEATURES_DIR: &str = "features";
const FORMAT_TAG: &str = "emmil-dataset";
const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    format: String,
    version: u32,
    num_classes: usize,
    feature_dim: usize,
    bags: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    id: String,
    clip_duration_sec: f64,
    labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<Segment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key_instances: Option<Vec<u8>>,
}

fn valid_bag_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

pub fn feature_path(dir: &Path, bag_id: &str) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{bag_id}.bin"))
}

pub fn encode_features(features: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + features.len() * 4);
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for &v in features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<DenseMatrix> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(path, "truncated header"));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if rows == 0 {
        return Err(Error::format(path, "header declares T = 0 clips"));
    }
    if cols == 0 {
        return Err(Error::format(path, "header declares d = 0"));
    }
    let expected = usize::try_from(rows)
        .ok()
        .zip(usize::try_from(cols).ok())
        .and_then(|(r, c)| r.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_BYTES))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated: {} bytes, header requires {expected}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    DenseMatrix::from_vec(rows as usize, cols as usize, data)
}

/// Writes `data` under `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let fdir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut entries = Vec::with_capacity(data.len());
    for bag in data.bags() {
        if !valid_bag_id(bag.id()) {
            return Err(Error::Data(format!("bag id {:?} is not file-name safe", bag.id())));
        }
        let path = feature_path(dir, bag.id());
        fs::write(&path, encode_features(bag.features())).map_err(|e| Error::io(&path, e))?;
        entries.push(IndexEntry {
            id: bag.id().to_string(),
            clip_duration_sec: bag.sequence.clip_duration_sec(),
            labels: bag.label.as_slice().to_vec(),
            segments: bag.segments.clone(),
            key_instances: bag
                .key_instances
                .as_ref()
                .map(|z| z.iter().map(|&b| u8::from(b)).collect()),
        });
    }
    let index = IndexFile {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        num_classes: data.num_classes(),
        feature_dim: data.feature_dim(),
        bags: entries,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory written by [`save_dataset`] or by hand.
pub fn load_features(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: IndexFile =
        serde_json::from_str(&text).map_err(|e| Error::format(&index_path, e.to_string()))?;
    if index.format != FORMAT_TAG || index.version != FORMAT_VERSION {
        return Err(Error::format(
            &index_path,
            format!("unsupported format {} v{}", index.format, index.version),
        ));
    }

    let mut bags = Vec::with_capacity(index.bags.len());
    for entry in index.bags {
        let id = entry.id;
        if !valid_bag_id(&id) {
            return Err(Error::format(&index_path, format!("bag id {id:?} is not file-name safe")));
        }
        let path = feature_path(dir, &id);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let features = decode_features(&bytes, &path)?;
        if features.cols() != index.feature_dim {
            return Err(Error::Data(format!(
                "bag {id}: feature dimension {} differs from dataset dimension {}",
                features.cols(),
                index.feature_dim
            )));
        }
        let label = BagLabel::new(entry.labels).map_err(|e| Error::Data(format!("bag {id}: {e}")))?;
        if let Some(segs) = &entry.segments {
            for s in segs {
                Segment::new(s.class, s.start_sec, s.end_sec)
                    .map_err(|e| Error::Data(format!("bag {id}: {e}")))?;
            }
        }
        let key_instances = match entry.key_instances {
            Some(z) => {
                if z.iter().any(|&v| v > 1) {
                    return Err(Error::Data(format!("bag {id}: key_instances must be 0/1")));
                }
                Some(z.into_iter().map(|v| v == 1).collect())
            }
            None => None,
        };
        bags.push(Bag {
            sequence: FeatureSequence::new(id, features, entry.clip_duration_sec)?,
            label,
            segments: entry.segments,
            key_instances,
        });
    }
    Dataset::new(index.num_classes, index.feature_dim, bags)
}

/// SHA-256 over the index file and every referenced feature file, in index
/// order, as lowercase hex.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: IndexFile =
        serde_json::from_slice(&text).map_err(|e| Error::format(&index_path, e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(&text);
    for entry in &index.bags {
        let path = feature_path(dir, &entry.id);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(&bytes);
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
