use std::time::Instant;

use ncc_core::model::{CompletionModel, Suggestion};
use ncc_core::providers::{provide_scope, ApiTable};
use ncc_core::tokenizers::tokenize_source;
use serde::{Deserialize, Serialize};

/// Context as raw source text or as an already tokenized list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Context {
    Text(String),
    Tokens(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionRequest {
    pub context: Context,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub suggestions: Vec<Suggestion>,
    pub model_id: String,
    pub latency_ms: f64,
}

#[derive(Debug, PartialEq)]
pub enum RequestError {
    /// The request cannot be served as given.
    Invalid(String),
    /// Scoring failed.
    Internal(String),
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RequestError::Invalid(m) | RequestError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for RequestError {}

/// Tokens, receiver flags and candidates ready for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub tokens: Vec<String>,
    pub receiver: Vec<bool>,
    pub candidates: Vec<String>,
}

/// Resolves the completion point and the candidate list. Without an
/// explicit receiver the token before a trailing `.` is used; without
/// explicit candidates the receiver's members come from `table`.
pub fn prepare(table: &ApiTable, request: &CompletionRequest) -> Result<Prepared, RequestError> {
    let mut tokens = match &request.context {
        Context::Text(t) => tokenize_source(t),
        Context::Tokens(t) => t.clone(),
    };
    let ends_with_dot = tokens.last().is_some_and(|t| t == ".");
    let receiver = match &request.receiver {
        Some(r) => {
            if !ends_with_dot {
                tokens.push(r.clone());
                tokens.push(".".into());
            }
            Some(r.clone())
        }
        None if ends_with_dot && tokens.len() >= 2 => Some(tokens[tokens.len() - 2].clone()),
        None => None,
    };
    let candidates = match (&request.candidates, &receiver) {
        (Some(c), _) => {
            let mut seen = std::collections::HashSet::new();
            let c: Vec<String> = c.iter().filter(|s| seen.insert(s.as_str())).cloned().collect();
            if c.is_empty() {
                return Err(RequestError::Invalid("candidate list is empty".into()));
            }
            c
        }
        (None, Some(r)) => provide_scope(table, &tokens, r)
            .map_err(|e| RequestError::Invalid(e.to_string()))?
            .candidates,
        (None, None) => {
            return Err(RequestError::Invalid(
                "no completion point: end the context with `name.` or pass a receiver or candidates".into(),
            ))
        }
    };
    let bits = tokens.iter().map(|t| Some(t) == receiver.as_ref()).collect();
    Ok(Prepared {
        tokens,
        receiver: bits,
        candidates,
    })
}

/// Ranks a request and keeps the `top_k` best suggestions. Probabilities
/// are those of the full candidate list.
pub fn complete(
    model: &CompletionModel,
    model_id: &str,
    table: &ApiTable,
    request: &CompletionRequest,
    default_top_k: usize,
) -> Result<CompletionResponse, RequestError> {
    let p = prepare(table, request)?;
    let top_k = request.top_k.unwrap_or(default_top_k);
    if top_k == 0 {
        return Err(RequestError::Invalid("top_k must be positive".into()));
    }
    let start = Instant::now();
    let ranked = model
        .rank(&p.tokens, &p.receiver, &p.candidates)
        .map_err(|e| RequestError::Internal(e.to_string()))?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(CompletionResponse {
        suggestions: ranked.truncated(top_k).items,
        model_id: model_id.to_string(),
        latency_ms,
    })
}

/// Line-oriented completion session. Lines ending in `.` are completion
/// requests; other lines are remembered as context for later requests.
pub struct Repl<'a> {
    model: &'a CompletionModel,
    model_id: String,
    table: &'a ApiTable,
    candidates: Option<Vec<String>>,
    top_k: usize,
    buffer: String,
}

impl<'a> Repl<'a> {
    pub fn new(model: &'a CompletionModel, table: &'a ApiTable, candidates: Option<Vec<String>>, top_k: usize) -> Self {
        Self {
            model,
            model_id: model.model_id(),
            table,
            candidates,
            top_k,
            buffer: String::new(),
        }
    }

    /// Output for one input line.
    pub fn handle_line(&mut self, line: &str) -> String {
        let line = line.trim_end();
        if line.is_empty() {
            return String::new();
        }
        if !line.ends_with('.') {
            self.buffer.push_str(line);
            self.buffer.push('\n');
            return "(no `.` at the end: line kept as context; type e.g. `x.` to complete)\n".into();
        }
        let request = CompletionRequest {
            context: Context::Text(format!("{}{line}", self.buffer)),
            receiver: None,
            candidates: self.candidates.clone(),
            top_k: Some(self.top_k),
        };
        match complete(self.model, &self.model_id, self.table, &request, self.top_k) {
            Ok(resp) => resp
                .suggestions
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{:>2}. {:<24} {:.4}\n", i + 1, s.candidate, s.probability))
                .collect(),
            Err(e) => format!("error: {e}\n"),
        }
    }
}
