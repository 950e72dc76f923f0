use super::{shot_splits, CountProfile, DataError, ShotSplits};

/// Labeled feature vectors with their class-count profile and shot splits.
///
/// Immutable once built; every constructor checks that the label histogram
/// matches the profile exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    profile: CountProfile,
    splits: ShotSplits,
}

impl LongTailDataset {
    /// `features` is row-major, `labels.len()` rows of width `dim`.
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>, profile: CountProfile) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Validation("feature dimension is zero".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::Validation(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        let classes = profile.num_classes();
        let mut hist = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(DataError::Validation(format!(
                    "sample {i} has label {y} but there are {classes} classes"
                )));
            }
            hist[y] += 1;
        }
        if hist != profile.counts() {
            return Err(DataError::Validation(format!(
                "label histogram {hist:?} does not match profile counts {:?}",
                profile.counts()
            )));
        }
        let splits = shot_splits(&profile);
        Ok(Self {
            dim,
            features,
            labels,
            profile,
            splits,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.profile.num_classes()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn profile(&self) -> &CountProfile {
        &self.profile
    }

    pub fn splits(&self) -> &ShotSplits {
        &self.splits
    }

    /// Sample indices of every class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Row-major feature block for the given sample indices.
    pub fn gather_features(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.feature(i));
        }
        out
    }
}
