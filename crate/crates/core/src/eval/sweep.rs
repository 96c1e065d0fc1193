use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, pareto_front, EvalReport, ParetoPoint};
use crate::corpus::DatasetSplit;
use crate::model::TrainConfig;
use crate::train::train;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub report: EvalReport,
}

impl SweepRow {
    pub fn point(&self) -> ParetoPoint {
        ParetoPoint {
            recall5: self.report.recall_at_5,
            size_bytes: self.report.size_bytes as f64,
            latency_ms: self.report.latency.as_ref().map_or(0.0, |l| l.p50_ms),
            config: self.report.config.clone(),
        }
    }
}

/// Cartesian product of `key -> values` over `base`, first key varying
/// slowest. Invalid combinations are skipped.
pub fn expand_grid(base: &TrainConfig, grid: &[(String, Vec<String>)]) -> Result<Vec<TrainConfig>> {
    let mut configs = vec![base.clone()];
    for (key, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("grid key {key} has no values")));
        }
        let mut next = Vec::with_capacity(configs.len() * values.len());
        for c in &configs {
            for v in values {
                let mut c = c.clone();
                c.set(key, v)?;
                next.push(c);
            }
        }
        configs = next;
    }
    Ok(configs.into_iter().filter(|c| c.validate().is_ok()).collect())
}

/// Trains and evaluates every configuration, appending one JSON line per
/// finished run to `jsonl`.
pub fn run_sweep(
    configs: &[TrainConfig],
    split: &DatasetSplit,
    latency_reps: usize,
    jsonl: &mut dyn Write,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let outcome = train(config, split)?;
        let report = evaluate(&outcome.model, &split.test, Some(&split.train), latency_reps)?;
        let row = SweepRow {
            config: config.clone(),
            best_epoch: outcome.best_epoch,
            report,
        };
        serde_json::to_writer(&mut *jsonl, &row)?;
        writeln!(jsonl)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes the non-dominated rows as `recall5,size_bytes,latency_ms,config`.
pub fn write_pareto_csv(rows: &[SweepRow], mut w: impl Write) -> Result<Vec<ParetoPoint>> {
    let points: Vec<ParetoPoint> = rows.iter().map(SweepRow::point).collect();
    let front = pareto_front(&points)?;
    writeln!(w, "recall5,size_bytes,latency_ms,config")?;
    for p in &front {
        writeln!(w, "{:.6},{},{:.4},{}", p.recall5, p.size_bytes, p.latency_ms, p.config)?;
    }
    Ok(front)
}
