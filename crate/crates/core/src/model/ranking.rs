use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub candidate: String,
    pub probability: f64,
}

/// Candidates ordered by probability, most likely first. Equal
/// probabilities are ordered by candidate string.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedSuggestions {
    pub items: Vec<Suggestion>,
}

impl RankedSuggestions {
    /// Softmax over `logits` (computed in 64-bit) followed by sorting.
    pub fn from_logits(candidates: &[String], logits: &[f64]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Data("no candidates to rank".into()));
        }
        if candidates.len() != logits.len() {
            return Err(Error::Data(format!(
                "{} candidates but {} scores",
                candidates.len(),
                logits.len()
            )));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut items: Vec<Suggestion> = candidates
            .iter()
            .zip(exps)
            .map(|(c, e)| Suggestion {
                candidate: c.clone(),
                probability: e / z,
            })
            .collect();
        items.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then_with(|| a.candidate.cmp(&b.candidate))
        });
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based position of `target`, if ranked at all.
    pub fn rank_of(&self, target: &str) -> Option<usize> {
        self.items.iter().position(|s| s.candidate == target).map(|i| i + 1)
    }

    pub fn top(&self, k: usize) -> &[Suggestion] {
        &self.items[..k.min(self.items.len())]
    }

    pub fn truncated(mut self, k: usize) -> Self {
        self.items.truncate(k);
        self
    }

    pub fn candidates(&self) -> Vec<&str> {
        self.items.iter().map(|s| s.candidate.as_str()).collect()
    }
}
