//! Completion instances: schema, JSON-Lines ingestion, deduplication and
//! per-group splitting.

mod synth;

pub use synth::{synth_generate, synth_world, SynthSpec, SynthType, SynthWorld};

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Default number of context tokens kept before the completion location.
pub const CONTEXT_SIZE: usize = 80;

/// One completion location: the tokens before it, which of them refer to the
/// receiver, the candidate members a static analysis offered, and the member
/// the developer actually used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionInstance {
    pub id: String,
    /// Most recent tokens, oldest first.
    pub context_tokens: Vec<String>,
    /// Indices into `context_tokens` bound to the receiver.
    #[serde(default)]
    pub receiver_mask: Vec<usize>,
    pub candidates: Vec<String>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library: Option<String>,
}

impl CompletionInstance {
    pub fn validate(&self, max_context: usize) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidInstance {
                id: self.id.clone(),
                msg,
            })
        };
        if self.candidates.is_empty() {
            return bad("empty candidate list".into());
        }
        if !self.candidates.contains(&self.target) {
            return bad(format!("target {:?} is not among the candidates", self.target));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.candidates.iter().find(|c| !seen.insert(c.as_str())) {
            return bad(format!("duplicate candidate {dup:?}"));
        }
        if self.context_tokens.len() > max_context {
            return bad(format!(
                "{} context tokens exceed the limit of {max_context}",
                self.context_tokens.len()
            ));
        }
        if let Some(&i) = self.receiver_mask.iter().find(|&&i| i >= self.context_tokens.len()) {
            return bad(format!("receiver index {i} outside the context"));
        }
        Ok(())
    }

    /// Per-position receiver flags.
    pub fn receiver_bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.context_tokens.len()];
        for &i in &self.receiver_mask {
            if let Some(b) = bits.get_mut(i) {
                *b = true;
            }
        }
        bits
    }

    /// Keeps the `n` most recent tokens and shifts the receiver mask.
    pub fn truncate_context(&mut self, n: usize) {
        let len = self.context_tokens.len();
        if len <= n {
            return;
        }
        let drop = len - n;
        self.context_tokens.drain(..drop);
        self.receiver_mask = self
            .receiver_mask
            .iter()
            .filter(|&&i| i >= drop)
            .map(|&i| i - drop)
            .collect();
    }

    /// File/group the instance came from: the id up to its first `:`.
    pub fn group(&self) -> &str {
        self.id.split(':').next().unwrap_or(&self.id)
    }
}

/// Reads a JSON-Lines dataset, validating each record. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<CompletionInstance>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let inst: CompletionInstance =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        inst.validate(CONTEXT_SIZE).map_err(|e| parse_err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(mut w: impl Write, instances: &[CompletionInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn dedup_key(inst: &CompletionInstance) -> [u8; 32] {
    let mut h = Sha256::new();
    for part in [&inst.context_tokens, &inst.candidates] {
        h.update((part.len() as u64).to_le_bytes());
        for t in part {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
    }
    h.update(inst.target.as_bytes());
    h.finalize().into()
}

/// Drops exact duplicates of (context, candidates, target), keeping the first.
pub fn dedup(instances: Vec<CompletionInstance>) -> Vec<CompletionInstance> {
    let mut seen = HashSet::new();
    instances
        .into_iter()
        .filter(|inst| seen.insert(dedup_key(inst)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CompletionInstance>,
    pub valid: Vec<CompletionInstance>,
    pub test: Vec<CompletionInstance>,
}

impl DatasetSplit {
    /// Removes instances of `library` from train/valid and keeps only that
    /// library in test, for measuring generalisation to an unseen API.
    pub fn hold_out_library(&self, library: &str) -> Result<DatasetSplit> {
        let is_lib = |i: &CompletionInstance| i.library.as_deref() == Some(library);
        let test: Vec<_> = self
            .train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .filter(|i| is_lib(i))
            .cloned()
            .collect();
        if test.is_empty() {
            return Err(Error::Data(format!("library {library:?} does not occur in the data")));
        }
        Ok(DatasetSplit {
            train: self.train.iter().filter(|i| !is_lib(i)).cloned().collect(),
            valid: self.valid.iter().filter(|i| !is_lib(i)).cloned().collect(),
            test,
        })
    }
}

/// Splits whole groups into train/valid/test by a seeded shuffle of the
/// group ids. Group counts per part are the rounded ratio targets.
pub fn split<F>(
    instances: &[CompletionInstance],
    ratios: (f64, f64, f64),
    group_key: F,
    seed: u64,
) -> Result<DatasetSplit>
where
    F: Fn(&CompletionInstance) -> String,
{
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, inst) in instances.iter().enumerate() {
        let key = group_key(inst);
        members
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    if order.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 groups to split, found {}",
            order.len()
        )));
    }
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = order.len() as f64;
    let n_train = (a * n).round() as usize;
    let n_valid = ((a + b) * n).round() as usize - n_train;
    let mut out = DatasetSplit::default();
    for (gi, key) in order.iter().enumerate() {
        let part = if gi < n_train {
            &mut out.train
        } else if gi < n_train + n_valid {
            &mut out.valid
        } else {
            &mut out.test
        };
        part.extend(members[key].iter().map(|&i| instances[i].clone()));
    }
    Ok(out)
}

/// [`split`] with the default 60/20/20 ratios and per-file grouping.
pub fn split_by_file(instances: &[CompletionInstance], seed: u64) -> Result<DatasetSplit> {
    split(instances, (0.6, 0.2, 0.2), |i| i.group().to_string(), seed)
}
