use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{self, ArrayData, ContainerKind, NamedArray};
use super::{CountProfile, DataError, LongTailDataset, ShotSplits};

/// Human-readable sidecar written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u16,
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub counts: Vec<usize>,
    pub splits: ShotSplits,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

fn encode_dataset(ds: &LongTailDataset) -> Vec<u8> {
    let counts: Vec<u64> = ds.profile().counts().iter().map(|&c| c as u64).collect();
    let labels: Vec<u32> = ds.labels().iter().map(|&y| y as u32).collect();
    container::encode(
        ContainerKind::Dataset,
        &[
            NamedArray::new("counts", &[counts.len()], ArrayData::U64(counts)),
            NamedArray::new(
                "features",
                &[ds.len(), ds.dim()],
                ArrayData::F64(ds.features().to_vec()),
            ),
            NamedArray::new("labels", &[labels.len()], ArrayData::U32(labels)),
        ],
    )
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the dataset's binary encoding.
pub fn dataset_checksum(ds: &LongTailDataset) -> String {
    sha256_hex(&encode_dataset(ds))
}

/// `data.bin` → `data.bin.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the binary dataset and its JSON manifest. Returns the manifest.
pub fn save_dataset(
    ds: &LongTailDataset,
    path: &Path,
    generator: Option<serde_json::Value>,
) -> Result<DatasetManifest, DataError> {
    let bytes = encode_dataset(ds);
    let manifest = DatasetManifest {
        format: "dbltr-dataset".into(),
        version: container::VERSION,
        classes: ds.num_classes(),
        dim: ds.dim(),
        samples: ds.len(),
        counts: ds.profile().counts().to_vec(),
        splits: ds.splits().clone(),
        sha256: sha256_hex(&bytes),
        generator,
    };
    fs::write(path, &bytes).map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn load_dataset(path: &Path) -> Result<LongTailDataset, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_dataset(&bytes)
}

fn decode_dataset(bytes: &[u8]) -> Result<LongTailDataset, DataError> {
    let (kind, arrays) = container::decode(bytes)?;
    if kind != ContainerKind::Dataset {
        return Err(DataError::Validation("file is a checkpoint, not a dataset".into()));
    }
    let counts = match &container::find(&arrays, "counts")?.data {
        ArrayData::U64(v) => v.iter().map(|&c| c as usize).collect(),
        _ => return Err(DataError::Validation("`counts` must be u64".into())),
    };
    let features = container::find(&arrays, "features")?;
    let (n, dim) = match features.shape.as_slice() {
        [n, d] => (*n, *d),
        s => return Err(DataError::Validation(format!("`features` must be 2-D, got {s:?}"))),
    };
    let ArrayData::F64(values) = &features.data else {
        return Err(DataError::Validation("`features` must be f64".into()));
    };
    let labels: Vec<usize> = match &container::find(&arrays, "labels")?.data {
        ArrayData::U32(v) => v.iter().map(|&y| y as usize).collect(),
        _ => return Err(DataError::Validation("`labels` must be u32".into())),
    };
    if labels.len() != n {
        return Err(DataError::Validation(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    LongTailDataset::new(dim, values.clone(), labels, CountProfile::new(counts)?)
}
