//! Long-tailed class-count profiles, synthetic Gaussian datasets that realize
//! them, the Many/Medium/Few partition, and the on-disk dataset format.

pub mod container;
mod dataset;
mod io;
mod profile;
mod synth;

pub use dataset::LongTailDataset;
pub use io::{dataset_checksum, load_dataset, manifest_path, save_dataset, DatasetManifest};
pub use profile::{
    exponential_profile, pareto_profile, shot_splits, CountProfile, ExponentConvention, ShotSplits, Split,
};
pub use synth::{synth_gaussian, GaussianMixture};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("cannot place {classes} orthogonal class means in {dim} dimensions")]
    Placement { classes: usize, dim: usize },
    #[error("malformed file at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
