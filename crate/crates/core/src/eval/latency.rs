use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::CompletionInstance;
use crate::model::CompletionModel;
use crate::{Error, Result};

/// Untimed suggestions served before measuring.
pub const WARMUP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub count: usize,
    pub warmup: usize,
}

impl LatencyStats {
    /// Summary of raw millisecond samples; percentiles use the nearest-rank
    /// rule.
    pub fn from_samples(samples: &[f64], warmup: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no latency samples".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = |p: f64| sorted[((p * n).ceil() as usize).clamp(1, sorted.len()) - 1];
        Ok(Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
            count: samples.len(),
            warmup,
        })
    }
}

/// Times single-instance suggestions: context encoding plus candidate
/// scoring, one instance per measurement, with a cold token cache. The
/// candidate lists are prepared beforehand so provider work is excluded.
/// Instances are cycled if there are fewer than `repetitions`.
pub fn measure_latency(model: &CompletionModel, instances: &[CompletionInstance], repetitions: usize) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::Config("latency repetitions must be positive".into()));
    }
    if instances.is_empty() {
        return Err(Error::Data("no instances to time".into()));
    }
    let prepared: Vec<(Vec<bool>, &[String])> = instances
        .iter()
        .map(|i| {
            let cands: &[String] = match model.vocab_provider() {
                Some(v) => v.targets(),
                None => &i.candidates,
            };
            (i.receiver_bits(), cands)
        })
        .collect();
    let mut samples = Vec::with_capacity(repetitions);
    for k in 0..WARMUP + repetitions {
        let j = k % instances.len();
        let (bits, cands) = &prepared[j];
        let start = Instant::now();
        let ranked = model.rank(&instances[j].context_tokens, bits, cands)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(ranked);
        if k >= WARMUP {
            samples.push(ms);
        }
    }
    LatencyStats::from_samples(&samples, WARMUP)
}
