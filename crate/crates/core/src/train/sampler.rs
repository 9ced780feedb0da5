//! Collision-aware mini-batch sampling.
//!
//! Candidates are drawn uniformly from a pool. A candidate that shares a
//! label on any non-trained attribute with an already selected member is
//! redrawn, up to [`RETRY_BUDGET`] times. Once the budget is spent the
//! sampler takes a uniform pick among the collision-free candidates that
//! remain, or accepts a collision when none remain.

use std::collections::HashSet;

use rand::Rng;

use crate::train::data::TrainSet;

pub const RETRY_BUDGET: usize = 10;

#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
    collision_keys: Vec<String>,
    batch_size: usize,
}

impl BatchSampler {
    /// `pool` lists eligible item positions; `trained_label` is the label key
    /// of the axis being trained and is exempt from collision checks.
    pub fn new(data: &TrainSet, pool: Vec<usize>, trained_label: Option<&str>, batch_size: usize) -> Self {
        let collision_keys = data
            .label_keys()
            .into_iter()
            .filter(|k| Some(k.as_str()) != trained_label)
            .collect();
        Self {
            pool,
            collision_keys,
            batch_size,
        }
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn collision_keys(&self) -> &[String] {
        &self.collision_keys
    }

    /// Batch size actually produced: capped at the pool size.
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.min(self.pool.len())
    }

    fn labels_of<'a>(&'a self, data: &'a TrainSet, i: usize) -> impl Iterator<Item = (usize, &'a str)> + 'a {
        let labels = &data.example(i).labels;
        self.collision_keys
            .iter()
            .enumerate()
            .filter_map(move |(k, key)| labels.get(key).map(|v| (k, v.as_str())))
    }

    pub fn sample<R: Rng + ?Sized>(&self, data: &TrainSet, rng: &mut R) -> Vec<usize> {
        let size = self.effective_batch_size();
        let mut batch = Vec::with_capacity(size);
        let mut chosen: HashSet<usize> = HashSet::with_capacity(size);
        let mut used: HashSet<(usize, &str)> = HashSet::new();

        let collides = |i: usize, chosen: &HashSet<usize>, used: &HashSet<(usize, &str)>| {
            chosen.contains(&i) || self.labels_of(data, i).any(|l| used.contains(&l))
        };

        while batch.len() < size {
            let mut pick = None;
            let mut last = 0;
            for _ in 0..=RETRY_BUDGET {
                let c = self.pool[rng.random_range(0..self.pool.len())];
                last = c;
                if !collides(c, &chosen, &used) {
                    pick = Some(c);
                    break;
                }
            }
            let pick = pick.unwrap_or_else(|| {
                let clean: Vec<usize> = self
                    .pool
                    .iter()
                    .copied()
                    .filter(|&i| !collides(i, &chosen, &used))
                    .collect();
                if !clean.is_empty() {
                    clean[rng.random_range(0..clean.len())]
                } else if !chosen.contains(&last) {
                    last
                } else {
                    let fresh: Vec<usize> =
                        self.pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
                    fresh[rng.random_range(0..fresh.len())]
                }
            });
            chosen.insert(pick);
            used.extend(self.labels_of(data, pick));
            batch.push(pick);
        }
        batch
    }
}

/// Samples one batch over the whole set.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &TrainSet,
    trained_label: Option<&str>,
    batch_size: usize,
    rng: &mut R,
) -> Vec<usize> {
    BatchSampler::new(data, (0..data.len()).collect(), trained_label, batch_size).sample(data, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::train::data::TrainExample;
    use crate::train::head::PooledFeature;

    fn dataset(n_speakers: usize, n_sentences: usize) -> TrainSet {
        let mut feats = Vec::new();
        let mut sup = Vec::new();
        for s in 0..n_speakers {
            for t in 0..n_sentences {
                let id = format!("s{s}_t{t}");
                feats.push(PooledFeature::new(&id, vec![s as f64, t as f64, 1.0]));
                let mut ex = TrainExample::new(&id);
                ex.labels.insert("speaker".into(), format!("s{s}"));
                ex.labels.insert("sentence".into(), format!("t{t}"));
                sup.push(ex);
            }
        }
        TrainSet::new(feats, sup).unwrap()
    }

    fn speaker_collisions(data: &TrainSet, batch: &[usize]) -> usize {
        let mut seen = HashSet::new();
        batch
            .iter()
            .filter(|&&i| !seen.insert(data.example(i).labels["speaker"].clone()))
            .count()
    }

    #[test]
    fn single_speaker_still_fills() {
        let data = dataset(1, 30);
        let mut rng = stream(1, Stream::Sampler);
        let batch = sample_batch(&data, Some("sentence"), 16, &mut rng);
        assert_eq!(batch.len(), 16);
        assert_eq!(batch.iter().collect::<HashSet<_>>().len(), 16);
    }

    #[test]
    fn no_speaker_collisions_when_avoidable() {
        // 8 speakers, batch of 8: exactly as many speakers as slots.
        let data = dataset(8, 25);
        let sampler = BatchSampler::new(&data, (0..data.len()).collect(), Some("sentence"), 8);
        assert_eq!(sampler.collision_keys(), &["speaker".to_string()]);
        let mut rng = stream(42, Stream::Sampler);
        let total: usize = (0..1000)
            .map(|_| speaker_collisions(&data, &sampler.sample(&data, &mut rng)))
            .sum();
        assert_eq!(total, 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let data = dataset(5, 10);
        let run = |seed| {
            let mut rng = stream(seed, Stream::Sampler);
            (0..20).map(|_| sample_batch(&data, Some("speaker"), 6, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn batch_capped_at_pool() {
        let data = dataset(2, 2);
        let mut rng = stream(0, Stream::Sampler);
        let b = sample_batch(&data, None, 10, &mut rng);
        assert_eq!(b.len(), 4);
    }
}
