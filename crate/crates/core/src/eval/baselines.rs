use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MISS;
use crate::corpus::CompletionInstance;

/// Ranks candidates by how often they were the target in training.
#[derive(Clone, Debug, Default)]
pub struct PopularityBaseline {
    counts: HashMap<String, usize>,
}

impl PopularityBaseline {
    pub fn fit(train: &[CompletionInstance]) -> Self {
        let mut counts = HashMap::new();
        for i in train {
            *counts.entry(i.target.clone()).or_default() += 1;
        }
        Self { counts }
    }

    pub fn from_counts<'a>(counts: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        Self {
            counts: counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn count(&self, s: &str) -> usize {
        self.counts.get(s).copied().unwrap_or(0)
    }

    /// Most frequent first, equal counts in string order; never-seen
    /// candidates come after every seen one.
    pub fn rank<'a>(&self, candidates: &'a [String]) -> Vec<&'a str> {
        let mut out: Vec<&str> = candidates.iter().map(String::as_str).collect();
        out.sort_by(|a, b| self.count(b).cmp(&self.count(a)).then_with(|| a.cmp(b)));
        out
    }

    pub fn ranks(&self, instances: &[CompletionInstance]) -> Vec<usize> {
        instances
            .iter()
            .map(|i| {
                self.rank(&i.candidates)
                    .iter()
                    .position(|c| *c == i.target)
                    .map_or(MISS, |p| p + 1)
            })
            .collect()
    }
}

/// Uniformly shuffles each candidate list from a seeded stream.
#[derive(Clone, Debug)]
pub struct RandomBaseline {
    seed: u64,
}

impl RandomBaseline {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn ranks(&self, instances: &[CompletionInstance]) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        instances
            .iter()
            .map(|i| {
                let mut order: Vec<&String> = i.candidates.iter().collect();
                order.shuffle(&mut rng);
                order.iter().position(|c| **c == i.target).map_or(MISS, |p| p + 1)
            })
            .collect()
    }
}

/// Expected MRR of a uniform ranking of `m` candidates: `(1/m) sum 1/i`.
pub fn expected_random_mrr(m: usize) -> f64 {
    (1..=m).map(|i| 1.0 / i as f64).sum::<f64>() / m as f64
}
