use serde::{Deserialize, Serialize};

use super::DataError;

/// Per-class sample counts, head classes first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CountProfile {
    counts: Vec<usize>,
}

impl TryFrom<Vec<usize>> for CountProfile {
    type Error = DataError;

    fn try_from(counts: Vec<usize>) -> Result<Self, DataError> {
        Self::new(counts)
    }
}

impl From<CountProfile> for Vec<usize> {
    fn from(p: CountProfile) -> Self {
        p.counts
    }
}

impl CountProfile {
    pub fn new(counts: Vec<usize>) -> Result<Self, DataError> {
        if counts.is_empty() {
            return Err(DataError::Profile("no classes".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(DataError::Profile(format!("class {c} has zero samples")));
        }
        if let Some(w) = counts.windows(2).position(|w| w[1] > w[0]) {
            return Err(DataError::Profile(format!(
                "counts must be non-increasing, but class {} has {} > {}",
                w + 1,
                counts[w + 1],
                counts[w]
            )));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Largest over smallest class count.
    pub fn imbalance_factor(&self) -> f64 {
        self.counts[0] as f64 / *self.counts.last().expect("non-empty") as f64
    }
}

/// How the class index is scaled in the exponent of the exponential profile.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentConvention {
    /// `i / (C − 1)`: the last class sits at exactly `n_base / μ`.
    #[default]
    LastIndex,
    /// `i / 100` regardless of C.
    PerHundred,
}

/// `counts[i] = max(1, ⌊n_base / μ^e(i)⌋)` with `e(i)` chosen by `convention`.
pub fn exponential_profile(
    n_base: usize,
    mu: f64,
    classes: usize,
    convention: ExponentConvention,
) -> Result<CountProfile, DataError> {
    if !(mu >= 1.0) || !mu.is_finite() {
        return Err(DataError::Profile(format!("imbalance factor must be >= 1, got {mu}")));
    }
    if (n_base as f64) < mu {
        return Err(DataError::Profile(format!(
            "base count {n_base} is smaller than imbalance factor {mu}"
        )));
    }
    if classes < 2 {
        return Err(DataError::Profile(format!("need at least 2 classes, got {classes}")));
    }
    let counts = (0..classes)
        .map(|i| {
            let exponent = match convention {
                ExponentConvention::LastIndex => i as f64 / (classes - 1) as f64,
                ExponentConvention::PerHundred => i as f64 / 100.0,
            };
            ((n_base as f64 / mu.powf(exponent)).floor() as usize).max(1)
        })
        .collect();
    CountProfile::new(counts)
}

/// Pareto-shaped (Lomax) decay from `max_count` down to `min_count`.
///
/// `counts[i] = round(max · (1 + i/s)^(−power))` where the scale `s` is fitted
/// so that the last class lands on `min_count`; endpoints are pinned exactly.
pub fn pareto_profile(
    classes: usize,
    max_count: usize,
    min_count: usize,
    power: f64,
) -> Result<CountProfile, DataError> {
    if classes < 2 {
        return Err(DataError::Profile(format!("need at least 2 classes, got {classes}")));
    }
    if min_count < 1 || max_count <= min_count {
        return Err(DataError::Profile(format!(
            "need max_count > min_count >= 1, got {max_count} and {min_count}"
        )));
    }
    if !(power > 0.0) || !power.is_finite() {
        return Err(DataError::Profile(format!("power must be positive, got {power}")));
    }
    let ratio = max_count as f64 / min_count as f64;
    let scale = (classes - 1) as f64 / (ratio.powf(1.0 / power) - 1.0);
    let mut counts: Vec<usize> = (0..classes)
        .map(|i| {
            let v = max_count as f64 * (1.0 + i as f64 / scale).powf(-power);
            (v.round() as usize).clamp(min_count, max_count)
        })
        .collect();
    counts[0] = max_count;
    counts[classes - 1] = min_count;
    CountProfile::new(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    /// Many: more than 100 samples, Medium: 20 to 100, Few: under 20.
    pub fn of_count(count: usize) -> Self {
        if count > 100 {
            Split::Many
        } else if count >= 20 {
            Split::Medium
        } else {
            Split::Few
        }
    }

    pub const ALL: [Split; 3] = [Split::Many, Split::Medium, Split::Few];
}

/// Partition of class ids by shot count.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShotSplits {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl ShotSplits {
    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Many => &self.many,
            Split::Medium => &self.medium,
            Split::Few => &self.few,
        }
    }

    pub fn split_of(&self, class: usize) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.classes(s).contains(&class))
    }

    pub fn num_classes(&self) -> usize {
        self.many.len() + self.medium.len() + self.few.len()
    }

    /// Per-class lookup table, indexed by class id.
    pub fn lookup(&self) -> Vec<Split> {
        let mut out = vec![Split::Few; self.num_classes()];
        for s in Split::ALL {
            for &c in self.classes(s) {
                out[c] = s;
            }
        }
        out
    }
}

pub fn shot_splits(profile: &CountProfile) -> ShotSplits {
    let mut splits = ShotSplits::default();
    for (class, &n) in profile.counts().iter().enumerate() {
        match Split::of_count(n) {
            Split::Many => splits.many.push(class),
            Split::Medium => splits.medium.push(class),
            Split::Few => splits.few.push(class),
        }
    }
    splits
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exponential_endpoints() {
        let p = exponential_profile(500, 100.0, 100, ExponentConvention::LastIndex).unwrap();
        assert_eq!(p.counts()[0], 500);
        assert_eq!(p.counts()[99], 5);
        assert_eq!(p.imbalance_factor(), 100.0);

        let p = exponential_profile(500, 10.0, 100, ExponentConvention::LastIndex).unwrap();
        assert_eq!(p.counts()[99], 50);

        let p = exponential_profile(500, 1.0, 100, ExponentConvention::LastIndex).unwrap();
        assert!(p.counts().iter().all(|&c| c == 500));
    }

    #[test]
    fn per_hundred_convention_stops_short_of_mu() {
        let p = exponential_profile(500, 100.0, 100, ExponentConvention::PerHundred).unwrap();
        assert_eq!(p.counts()[0], 500);
        // 500 / 100^0.99 = 5.24...
        assert_eq!(p.counts()[99], 5);
        let exact = 500.0 / 100f64.powf(0.99);
        assert!(exact > 5.0);
    }

    #[test]
    fn exponential_rejects_bad_args() {
        assert!(exponential_profile(500, 0.5, 10, ExponentConvention::LastIndex).is_err());
        assert!(exponential_profile(5, 10.0, 10, ExponentConvention::LastIndex).is_err());
        assert!(exponential_profile(500, 10.0, 1, ExponentConvention::LastIndex).is_err());
    }

    #[test]
    fn pareto_endpoints() {
        let p = pareto_profile(1000, 1280, 5, 6.0).unwrap();
        assert_eq!(p.counts()[0], 1280);
        assert_eq!(p.counts()[999], 5);
        assert_eq!(*p.counts().iter().max().unwrap(), 1280);
        assert_eq!(*p.counts().iter().min().unwrap(), 5);

        assert_eq!(pareto_profile(2, 10, 5, 6.0).unwrap().counts(), &[10, 5]);

        let places = pareto_profile(365, 4980, 5, 6.0).unwrap();
        assert_eq!(places.imbalance_factor(), 996.0);
    }

    #[test]
    fn pareto_rejects_bad_args() {
        assert!(pareto_profile(10, 5, 5, 6.0).is_err());
        assert!(pareto_profile(10, 50, 0, 6.0).is_err());
        assert!(pareto_profile(10, 50, 5, 0.0).is_err());
        assert!(pareto_profile(1, 50, 5, 6.0).is_err());
    }

    #[test]
    fn split_thresholds() {
        let s = shot_splits(&CountProfile::new(vec![500, 100, 19]).unwrap());
        assert_eq!(
            (s.many.as_slice(), s.medium.as_slice(), s.few.as_slice()),
            (&[0][..], &[1][..], &[2][..])
        );

        let s = shot_splits(&CountProfile::new(vec![101, 20]).unwrap());
        assert_eq!(s.many, vec![0]);
        assert_eq!(s.medium, vec![1]);

        let s = shot_splits(&CountProfile::new(vec![150; 4]).unwrap());
        assert_eq!(s.many.len(), 4);
        assert!(s.medium.is_empty() && s.few.is_empty());
    }

    #[test]
    fn profile_invariants_enforced() {
        assert!(CountProfile::new(vec![]).is_err());
        assert!(CountProfile::new(vec![5, 0]).is_err());
        assert!(CountProfile::new(vec![5, 6]).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_classes(mut counts in prop::collection::vec(1usize..400, 1..60)) {
            counts.sort_unstable_by(|a, b| b.cmp(a));
            let profile = CountProfile::new(counts).unwrap();
            let s = shot_splits(&profile);
            let mut all: Vec<usize> = s.many.iter().chain(&s.medium).chain(&s.few).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..profile.num_classes()).collect::<Vec<_>>());
        }

        #[test]
        fn exponential_ratio_tracks_mu(base in 50usize..2000, mu in 1.0f64..50.0, classes in 2usize..200) {
            prop_assume!(base as f64 >= mu);
            let p = exponential_profile(base, mu, classes, ExponentConvention::LastIndex).unwrap();
            let tail = p.counts()[classes - 1] as f64;
            // floor on the tail count moves the ratio by less than one tail unit
            prop_assert!(p.imbalance_factor() >= mu - 1e-9);
            prop_assert!(base as f64 / (tail + 1.0) < mu);
        }

        #[test]
        fn pareto_is_monotone(classes in 2usize..500, min in 1usize..20, extra in 1usize..3000, power in 0.5f64..10.0) {
            let p = pareto_profile(classes, min + extra, min, power).unwrap();
            prop_assert_eq!(p.counts()[0], min + extra);
            prop_assert_eq!(p.counts()[classes - 1], min);
        }
    }
}
