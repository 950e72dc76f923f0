//! Instance-balanced batches for the imbalanced branch, tail-class episodes
//! for the contrastive branch, and head-instance extraction.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LongTailDataset, ShotSplits, Split};
use crate::{Error, Result};

/// One pass over the dataset per call to [`UniformSampler::epoch`], in a
/// fresh seeded permutation each time.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    rng: ChaCha8Rng,
    len: usize,
    batch_size: usize,
}

impl UniformSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invalid("cannot sample batches from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
            batch_size,
        })
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub fn uniform_batches(dataset: &LongTailDataset, batch_size: usize, seed: u64) -> Result<UniformSampler> {
    UniformSampler::new(dataset.len(), batch_size, seed)
}

/// Which classes the tail sampler may draw from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailPool {
    Whole,
    #[default]
    MediumFew,
    Few,
}

impl TailPool {
    pub fn classes(self, splits: &ShotSplits) -> Vec<usize> {
        let mut out: Vec<usize> = match self {
            TailPool::Whole => splits
                .many
                .iter()
                .chain(&splits.medium)
                .chain(&splits.few)
                .copied()
                .collect(),
            TailPool::MediumFew => splits.medium.iter().chain(&splits.few).copied().collect(),
            TailPool::Few => splits.few.clone(),
        };
        out.sort_unstable();
        out
    }
}

/// An N-way episode. Row `k` of `support`/`query` belongs to `class_ids[k]`,
/// whose episode-local label is `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub class_ids: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
    /// Set when some class had fewer than support+query samples.
    pub with_replacement: bool,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn local_label(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn support_indices(&self) -> Vec<usize> {
        self.support.concat()
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.query.concat()
    }

    /// Local labels aligned with [`Episode::support_indices`].
    pub fn support_labels(&self) -> Vec<usize> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(k, r)| std::iter::repeat_n(k, r.len()))
            .collect()
    }

    /// Local labels aligned with [`Episode::query_indices`].
    pub fn query_labels(&self) -> Vec<usize> {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(k, r)| std::iter::repeat_n(k, r.len()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.support.iter().chain(&self.query).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws episodes from a fixed class pool with its own RNG.
#[derive(Debug, Clone)]
pub struct TailSampler {
    rng: ChaCha8Rng,
    pool: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl TailSampler {
    pub fn new(dataset: &LongTailDataset, pool: &[usize], seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Invalid("tail sampler pool is empty".into()));
        }
        if let Some(&bad) = pool.iter().find(|&&c| c >= dataset.num_classes()) {
            return Err(Error::Invalid(format!("pool class {bad} does not exist")));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            pool: pool.to_vec(),
            by_class: dataset.class_indices(),
        })
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    /// `n_way` distinct classes, uniformly from the pool, then `n_support` +
    /// `n_query` samples per class without replacement where the class is
    /// large enough.
    pub fn sample(&mut self, n_way: usize, n_support: usize, n_query: usize) -> Result<Episode> {
        if n_way == 0 || n_support == 0 || n_query == 0 {
            return Err(Error::Invalid("episode sizes must all be >= 1".into()));
        }
        if self.pool.len() < n_way {
            return Err(Error::Invalid(format!(
                "pool has {} classes but the episode needs {n_way}",
                self.pool.len()
            )));
        }
        let mut pool = self.pool.clone();
        let (chosen, _) = pool.partial_shuffle(&mut self.rng, n_way);
        let class_ids = chosen.to_vec();

        let mut episode = Episode {
            class_ids,
            support: Vec::with_capacity(n_way),
            query: Vec::with_capacity(n_way),
            with_replacement: false,
        };
        for &class in &episode.class_ids {
            let mut members = self.by_class[class].clone();
            let need = n_support + n_query;
            if members.len() >= need {
                let (picked, _) = members.partial_shuffle(&mut self.rng, need);
                episode.query.push(picked[..n_query].to_vec());
                episode.support.push(picked[n_query..].to_vec());
                continue;
            }
            episode.with_replacement = true;
            members.shuffle(&mut self.rng);
            if members.len() > n_query {
                // keep query and support disjoint, top support up by resampling
                let (query, rest) = members.split_at(n_query);
                let mut support = rest.to_vec();
                while support.len() < n_support {
                    support.push(*rest.choose(&mut self.rng).expect("non-empty"));
                }
                episode.query.push(query.to_vec());
                episode.support.push(support);
            } else {
                let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<usize> {
                    (0..k)
                        .map(|_| *members.choose(rng).expect("classes are non-empty"))
                        .collect()
                };
                episode.query.push(draw(&mut self.rng, n_query));
                episode.support.push(draw(&mut self.rng, n_support));
            }
        }
        Ok(episode)
    }
}

/// Batch members whose class is in the Many split.
pub fn head_instances(batch: &[usize], dataset: &LongTailDataset) -> Vec<usize> {
    let lookup = dataset.splits().lookup();
    batch
        .iter()
        .copied()
        .filter(|&i| lookup[dataset.label(i)] == Split::Many)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian, CountProfile};

    fn dataset(counts: Vec<usize>) -> LongTailDataset {
        let c = counts.len();
        synth_gaussian(&CountProfile::new(counts).unwrap(), c.max(2), 3.0, 1.0, 0).unwrap()
    }

    #[test]
    fn batches_chunk_an_epoch() {
        let mut s = UniformSampler::new(10, 4, 1).unwrap();
        let epoch = s.epoch();
        assert_eq!(epoch.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all = epoch.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_seeded() {
        let mut a = UniformSampler::new(50, 8, 3).unwrap();
        let mut b = UniformSampler::new(50, 8, 3).unwrap();
        for _ in 0..2 {
            assert_eq!(a.epoch(), b.epoch());
        }
    }

    #[test]
    fn epoch_matches_profile_counts() {
        let ds = dataset(vec![40, 20, 7, 3]);
        let mut s = uniform_batches(&ds, 16, 9).unwrap();
        let mut hist = vec![0; 4];
        for i in s.epoch().concat() {
            hist[ds.label(i)] += 1;
        }
        assert_eq!(hist, ds.profile().counts());
    }

    #[test]
    fn rejects_empty_and_zero_batch() {
        assert!(UniformSampler::new(0, 4, 0).is_err());
        assert!(UniformSampler::new(4, 0, 0).is_err());
    }

    #[test]
    fn forced_selection_takes_whole_pool() {
        let ds = dataset(vec![30, 25, 22, 21, 20, 10]);
        let pool = TailPool::MediumFew.classes(ds.splits());
        assert_eq!(pool, vec![0, 1, 2, 3, 4, 5]);
        let mut s = TailSampler::new(&ds, &[1, 2, 3, 4, 5], 4).unwrap();
        let ep = s.sample(5, 4, 1).unwrap();
        let mut ids = ep.class_ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 2, 3, 4, 5]);
        assert_eq!(ep.len(), 25);
        assert!(!ep.with_replacement);
        for (k, &class) in ep.class_ids.iter().enumerate() {
            assert_eq!(ep.local_label(class), Some(k));
            for &i in ep.support[k].iter().chain(&ep.query[k]) {
                assert_eq!(ds.label(i), class);
            }
            assert!(ep.query[k].iter().all(|q| !ep.support[k].contains(q)));
            let mut uniq = ep.support[k].clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 4);
        }
    }

    #[test]
    fn small_classes_resample_and_flag() {
        let ds = dataset(vec![3, 1]);
        let mut s = TailSampler::new(&ds, &[0, 1], 2).unwrap();
        let ep = s.sample(2, 4, 1).unwrap();
        assert!(ep.with_replacement);
        let k = ep.local_label(0).unwrap();
        // three samples: one query, support drawn from the other two
        assert!(!ep.support[k].contains(&ep.query[k][0]));
        assert_eq!(ep.support[k].len(), 4);
        let k1 = ep.local_label(1).unwrap();
        assert_eq!(ep.support[k1], vec![3; 4]);
        assert_eq!(ep.query[k1], vec![3]);
    }

    #[test]
    fn pool_too_small() {
        let ds = dataset(vec![30, 10]);
        let mut s = TailSampler::new(&ds, &[0, 1], 0).unwrap();
        assert!(s.sample(3, 1, 1).is_err());
        assert!(TailSampler::new(&ds, &[], 0).is_err());
    }

    #[test]
    fn episodes_are_seeded() {
        let ds = dataset(vec![40, 30, 25, 12, 9, 6]);
        let pool = TailPool::MediumFew.classes(ds.splits());
        let mut a = TailSampler::new(&ds, &pool, 5).unwrap();
        let mut b = TailSampler::new(&ds, &pool, 5).unwrap();
        for _ in 0..50 {
            assert_eq!(a.sample(3, 2, 1).unwrap(), b.sample(3, 2, 1).unwrap());
        }
    }

    #[test]
    fn head_instances_follow_many_split() {
        let ds = dataset(vec![150, 120, 30, 10]);
        let few: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == 3).collect();
        assert!(head_instances(&few, &ds).is_empty());
        let many: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) < 2).collect();
        assert_eq!(head_instances(&many, &ds), many);
    }

    #[test]
    fn pool_variants() {
        let ds = dataset(vec![150, 50, 10]);
        assert_eq!(TailPool::Whole.classes(ds.splits()), vec![0, 1, 2]);
        assert_eq!(TailPool::MediumFew.classes(ds.splits()), vec![1, 2]);
        assert_eq!(TailPool::Few.classes(ds.splits()), vec![2]);
    }
}
