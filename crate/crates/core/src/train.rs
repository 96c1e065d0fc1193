//! Minibatch training with Adam and early stopping on validation MRR.

use std::io::Write;
use std::time::Instant;

use ncc_tensor::{clip_global_norm, Adam, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CompletionInstance, DatasetSplit};
use crate::eval::mrr;
use crate::model::{CompletionModel, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best metric seen and says when `patience` epochs have passed
/// without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if metric <= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, metric)` of the best update so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: CompletionModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Shuffled batches of `size`; a final batch of one joins the previous
/// batch so in-batch distractors always exist.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        out.pop();
        out.push(&order[start..]);
    }
    out
}

/// Mean reciprocal rank of `model` on `instances`.
pub fn evaluate_mrr(model: &CompletionModel, instances: &[CompletionInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    mrr(&model.target_ranks(instances, 256)?)
}

pub fn train(config: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome> {
    train_with_log(config, split, &mut std::io::sink())
}

/// Trains from scratch, writing one `epoch train_loss valid_mrr` line per
/// epoch to `log`.
pub fn train_with_log(config: &TrainConfig, split: &DatasetSplit, log: &mut dyn Write) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut model: CompletionModel = CompletionModel::build(config, &split.train)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience.max(1));
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in batches(&order, config.batch_size) {
            let insts: Vec<&CompletionInstance> = batch.iter().map(|&i| &split.train[i]).collect();
            let examples = model.training_examples(&insts)?;
            if examples.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &examples)?;
            loss_sum += g.value(loss).item().unwrap_or(0.0) as f64 * examples.len() as f64;
            seen += examples.len();
            let mut grads = g.backward(loss)?.into_params();
            drop(g);
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(model.params_mut(), &grads);
        }
        if seen == 0 {
            return Err(Error::Data("no training instance has its target among the provider's candidates".into()));
        }
        let valid_mrr = if split.valid.is_empty() {
            evaluate_mrr(&model, &split.train)?
        } else {
            evaluate_mrr(&model, &split.valid)?
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            valid_mrr,
            seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{} {:.6} {:.6}", record.epoch, record.train_loss, record.valid_mrr)?;
        history.push(record);
        match stopper.update(epoch, valid_mrr) {
            StopDecision::Improved => best = Some(model.params().clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let best_epoch = stopper.best().map_or(history.len(), |(e, _)| e);
    if let Some(p) = best {
        *model.params_mut() = p;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
