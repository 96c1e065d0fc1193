use ncc_tensor::{ParamStore, Scalar};
use serde::{Deserialize, Serialize};

use super::{measure_latency, mrr, recall_at_k, LatencyStats, PopularityBaseline, RandomBaseline};
use crate::corpus::CompletionInstance;
use crate::model::CompletionModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mrr: f64,
}

impl MetricSummary {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            recall_at_1: recall_at_k(ranks, 1)?,
            recall_at_5: recall_at_k(ranks, 5)?,
            mrr: mrr(ranks)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: String,
    pub model_id: String,
    pub instances: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mrr: f64,
    pub params: usize,
    pub size_bytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity: Option<MetricSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<MetricSummary>,
}

impl EvalReport {
    pub fn metrics(&self) -> MetricSummary {
        MetricSummary {
            recall_at_1: self.recall_at_1,
            recall_at_5: self.recall_at_5,
            mrr: self.mrr,
        }
    }
}

/// `(parameter count, float32 bytes)` of a parameter store.
pub fn model_size<S: Scalar>(store: &ParamStore<S>) -> (usize, usize) {
    let n = store.num_scalars();
    (n, 4 * n)
}

/// Scores `model` on `test`. With `train` given, the popularity baseline is
/// reported alongside; `latency_reps > 0` adds a timing run.
pub fn evaluate(
    model: &CompletionModel,
    test: &[CompletionInstance],
    train: Option<&[CompletionInstance]>,
    latency_reps: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let ranks = model.target_ranks(test, 256)?;
    let m = MetricSummary::from_ranks(&ranks)?;
    let (params, size_bytes) = model_size(model.params());
    let latency = if latency_reps > 0 {
        Some(measure_latency(model, test, latency_reps)?)
    } else {
        None
    };
    let popularity = match train {
        Some(t) => Some(MetricSummary::from_ranks(&PopularityBaseline::fit(t).ranks(test))?),
        None => None,
    };
    Ok(EvalReport {
        config: model.config().describe(),
        model_id: model.model_id(),
        instances: test.len(),
        recall_at_1: m.recall_at_1,
        recall_at_5: m.recall_at_5,
        mrr: m.mrr,
        params,
        size_bytes,
        latency,
        popularity,
        random: None,
    })
}

/// Scores `model` on the instances of `library` in `test`, next to a seeded
/// random ranking of the same candidate lists. The model is expected to
/// have been trained without that library.
pub fn generalization_eval(
    model: &CompletionModel,
    test: &[CompletionInstance],
    library: &str,
    seed: u64,
) -> Result<EvalReport> {
    let held: Vec<CompletionInstance> = test
        .iter()
        .filter(|i| i.library.as_deref() == Some(library))
        .cloned()
        .collect();
    if held.is_empty() {
        return Err(Error::Data(format!("no test instances from library {library:?}")));
    }
    let mut report = evaluate(model, &held, None, 0)?;
    report.random = Some(MetricSummary::from_ranks(&RandomBaseline::new(seed).ranks(&held))?);
    Ok(report)
}
