//! Ranking metrics, baselines, cost accounting and sweeps.

mod baselines;
mod latency;
mod pareto;
mod report;
mod sweep;

pub use baselines::{expected_random_mrr, PopularityBaseline, RandomBaseline};
pub use latency::{measure_latency, LatencyStats, WARMUP};
pub use pareto::{dominates, pareto_front, ParetoPoint};
pub use report::{evaluate, generalization_eval, model_size, EvalReport, MetricSummary};
pub use sweep::{expand_grid, run_sweep, write_pareto_csv, SweepRow};

use crate::{Error, Result};

/// Rank value for a target that is not among the candidates.
pub const MISS: usize = usize::MAX;

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Data("no ranks to summarise".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Data("ranks are 1-based".into()));
    }
    Ok(())
}

/// Fraction of ranks that are at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("recall cutoff k must be at least 1".into()));
    }
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank; misses contribute zero.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    let total: f64 = ranks
        .iter()
        .map(|&r| if r == MISS { 0.0 } else { 1.0 / r as f64 })
        .sum();
    Ok(total / ranks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recall_examples() {
        assert!((recall_at_k(&[1, 6, 3], 5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[MISS, MISS], 5).unwrap(), 0.0);
        assert!(recall_at_k(&[1], 0).is_err());
    }

    #[test]
    fn mrr_examples() {
        assert!((mrr(&[1, 2, 4]).unwrap() - 0.583_333_333_333_333_3).abs() < 1e-12);
        assert_eq!(mrr(&[1, 1]).unwrap(), 1.0);
        assert_eq!(mrr(&[2, 2]).unwrap(), 0.5);
        assert_eq!(mrr(&[MISS, 1]).unwrap(), 0.5);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0]).is_err());
    }

    proptest! {
        #[test]
        fn recall_is_monotone_and_bounds_mrr(ranks in proptest::collection::vec(prop_oneof![1usize..30, Just(MISS)], 1..50)) {
            let mut prev = 0.0;
            for k in 1..35 {
                let r = recall_at_k(&ranks, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            let m = mrr(&ranks).unwrap();
            let r1 = recall_at_k(&ranks, 1).unwrap();
            prop_assert!(m >= r1 && m <= 1.0);
        }
    }
}
