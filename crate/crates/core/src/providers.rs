//! Candidate providers: where the set of completions to rank comes from.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CompletionInstance;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Vocab,
    Stan,
    Inbatch,
    Scope,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<String>,
    pub provenance: Provenance,
}

impl CandidateSet {
    pub fn contains(&self, s: &str) -> bool {
        self.candidates.iter().any(|c| c == s)
    }
}

/// Fixed list of the most frequent training targets, offered for every
/// context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct VocabProvider {
    targets: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for VocabProvider {
    fn from(targets: Vec<String>) -> Self {
        let index = targets.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { targets, index }
    }
}

impl From<VocabProvider> for Vec<String> {
    fn from(p: VocabProvider) -> Self {
        p.targets
    }
}

fn ranked_counts<'a>(targets: impl IntoIterator<Item = &'a str>) -> Vec<(&'a str, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in targets {
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
}

impl VocabProvider {
    /// Keeps the `v_max` most frequent targets, equal counts in string order.
    pub fn build<'a>(targets: impl IntoIterator<Item = &'a str>, v_max: usize) -> Self {
        Self::from(
            ranked_counts(targets)
                .into_iter()
                .take(v_max)
                .map(|(t, _)| t.to_string())
                .collect::<Vec<_>>(),
        )
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn position(&self, target: &str) -> Option<usize> {
        self.index.get(target).copied()
    }

    pub fn provide(&self) -> CandidateSet {
        CandidateSet {
            candidates: self.targets.clone(),
            provenance: Provenance::Vocab,
        }
    }
}

/// Smallest number of most-frequent targets whose occurrences make up at
/// least `fraction` of all target occurrences.
pub fn coverage_cutoff<'a>(targets: impl IntoIterator<Item = &'a str>, fraction: f64) -> usize {
    let ranked = ranked_counts(targets);
    let total: usize = ranked.iter().map(|r| r.1).sum();
    let need = fraction * total as f64;
    let mut acc = 0usize;
    for (i, (_, c)) in ranked.iter().enumerate() {
        acc += c;
        if acc as f64 >= need {
            return i + 1;
        }
    }
    ranked.len()
}

/// The candidates recorded with the instance, in their original order.
pub fn provide_stan(instance: &CompletionInstance) -> CandidateSet {
    CandidateSet {
        candidates: instance.candidates.clone(),
        provenance: Provenance::Stan,
    }
}

/// For each instance, its own target plus the distinct targets of the rest
/// of the batch. Every instance receives the same list, in order of first
/// occurrence.
pub fn provide_inbatch_distractors(batch: &[&CompletionInstance]) -> Result<Vec<CandidateSet>> {
    if batch.len() < 2 {
        return Err(Error::Data("in-batch distractors need at least two instances".into()));
    }
    let mut seen = HashSet::new();
    let shared: Vec<String> = batch
        .iter()
        .filter(|i| seen.insert(i.target.as_str()))
        .map(|i| i.target.clone())
        .collect();
    Ok(batch
        .iter()
        .map(|_| CandidateSet {
            candidates: shared.clone(),
            provenance: Provenance::Inbatch,
        })
        .collect())
}

/// Type or namespace name to member names, for interactive completion where
/// no candidate list comes with the request.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<String>>", into = "BTreeMap<String, Vec<String>>")]
pub struct ApiTable {
    members: BTreeMap<String, Vec<String>>,
}

impl TryFrom<BTreeMap<String, Vec<String>>> for ApiTable {
    type Error = Error;

    fn try_from(members: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if let Some((k, _)) = members.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Data(format!("api table entry {k:?} has no members")));
        }
        let members = members
            .into_iter()
            .map(|(k, v)| {
                let mut seen = HashSet::new();
                let v = v.into_iter().filter(|m| seen.insert(m.clone())).collect();
                (k, v)
            })
            .collect();
        Ok(Self { members })
    }
}

impl From<ApiTable> for BTreeMap<String, Vec<String>> {
    fn from(t: ApiTable) -> Self {
        t.members
    }
}

impl ApiTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self, key: &str) -> Option<&[String]> {
        self.members.get(key).map(Vec::as_slice)
    }

    /// Sorted union of all members.
    pub fn all_members(&self) -> Vec<String> {
        self.members
            .values()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn is_ident(t: &str) -> bool {
    t.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && t.chars().all(|c| c.is_alphanumeric() || c == '_')
}

/// Table key bound to `receiver` by the most recent assignment
/// `receiver = Name(...)` (dotted names use their last part) or import
/// (`import Name as receiver`, `import receiver`). A later assignment to
/// something unknown removes the binding.
pub fn resolve_binding<'a>(table: &ApiTable, tokens: &'a [String], receiver: &str) -> Option<&'a str> {
    let mut bound: Option<&str> = if table.members(receiver).is_some() {
        tokens.iter().find(|t| *t == receiver).map(String::as_str)
    } else {
        None
    };
    for i in 0..tokens.len() {
        if tokens[i] == receiver && tokens.get(i + 1).map(String::as_str) == Some("=") {
            let mut j = i + 2;
            let mut last = None;
            while j < tokens.len() && is_ident(&tokens[j]) {
                last = Some(tokens[j].as_str());
                if tokens.get(j + 1).map(String::as_str) == Some(".") {
                    j += 2;
                } else {
                    j += 1;
                    break;
                }
            }
            let call = tokens.get(j).map(String::as_str) == Some("(");
            bound = last.filter(|name| call && table.members(name).is_some());
        }
        if tokens[i] == "import" {
            let name = tokens.get(i + 1).map(String::as_str);
            let alias = match (tokens.get(i + 2).map(String::as_str), tokens.get(i + 3)) {
                (Some("as"), Some(a)) => Some(a.as_str()),
                _ => name,
            };
            if alias == Some(receiver) {
                bound = name.filter(|n| table.members(n).is_some());
            }
        }
    }
    bound
}

/// Members of the type bound to `receiver`, or the union of every member
/// when no binding is visible.
pub fn provide_scope(table: &ApiTable, context_tokens: &[String], receiver: &str) -> Result<CandidateSet> {
    if table.is_empty() {
        return Err(Error::Data("api table is empty".into()));
    }
    let candidates = match resolve_binding(table, context_tokens, receiver) {
        Some(key) => table.members(key).expect("binding refers to a key").to_vec(),
        None => table.all_members(),
    };
    Ok(CandidateSet {
        candidates,
        provenance: Provenance::Scope,
    })
}
