use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenEncoderKind {
    /// Whole-token embedding lookup.
    Token,
    /// Elementwise max over identifier subtoken embeddings.
    Subtoken,
    /// Elementwise max over learned byte-pair units.
    Bpe,
    /// Character convolution stack.
    Char,
    /// Subtokens mapped to rows by MD5 feature hashing.
    Hashed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextEncoderKind {
    Gru,
    Bigru,
    Cnn,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Fixed list of the most frequent training targets.
    Vocab,
    /// Candidates supplied with each instance.
    Stan,
    /// Training against the other targets of the minibatch; evaluated with
    /// the instance candidates.
    Inbatch,
}

macro_rules! display_lower {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(v.as_str().unwrap_or("?"))
            }
        }
    )*};
}
display_lower!(TokenEncoderKind, ContextEncoderKind, ProviderKind);

/// Architecture and training knobs. Every field can be overridden by name
/// with [`TrainConfig::set`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub token_encoder: TokenEncoderKind,
    pub context_encoder: ContextEncoderKind,
    /// Append a receiver bit to every context token encoding.
    pub annotate: bool,
    pub provider: ProviderKind,
    /// Token encoding width.
    pub d: usize,
    /// Context encoding width.
    pub h: usize,
    /// Recurrent, convolutional or attention layers.
    pub layers: usize,
    pub context_size: usize,
    /// Size of the token or subtoken vocabulary, UNK included.
    pub vocab_size: usize,
    pub merge_budget: usize,
    pub hash_modulus: usize,
    pub alphabet_size: usize,
    pub char_channels: usize,
    pub cnn_width: usize,
    pub heads: usize,
    /// Number of targets offered by the vocabulary provider.
    pub vocab_targets: usize,
    /// Cap on subword units per token; extra units are dropped from the end.
    pub max_units: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_encoder: TokenEncoderKind::Subtoken,
            context_encoder: ContextEncoderKind::Gru,
            annotate: false,
            provider: ProviderKind::Stan,
            d: 64,
            h: 64,
            layers: 1,
            context_size: 80,
            vocab_size: 10_000,
            merge_budget: 1_000,
            hash_modulus: 2_500,
            alphabet_size: 64,
            char_channels: 32,
            cnn_width: 3,
            heads: 4,
            vocab_targets: 1_000,
            max_units: 16,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 20,
            patience: 2,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("h", self.h),
            ("layers", self.layers),
            ("context_size", self.context_size),
            ("vocab_size", self.vocab_size),
            ("alphabet_size", self.alphabet_size),
            ("char_channels", self.char_channels),
            ("cnn_width", self.cnn_width),
            ("heads", self.heads),
            ("vocab_targets", self.vocab_targets),
            ("max_units", self.max_units),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and clip_norm must be positive".into()));
        }
        if self.hash_modulus < 2 {
            return Err(Error::Config("hash_modulus must be at least 2".into()));
        }
        match self.context_encoder {
            ContextEncoderKind::Bigru if !self.h.is_multiple_of(2) => {
                Err(Error::Config(format!("bigru needs an even h, got {}", self.h)))
            }
            ContextEncoderKind::Bigru if self.layers != 1 => {
                Err(Error::Config("bigru supports a single layer".into()))
            }
            ContextEncoderKind::Transformer if !self.h.is_multiple_of(self.heads) => Err(Error::Config(
                format!("h = {} is not divisible by {} heads", self.h, self.heads),
            )),
            _ => Ok(()),
        }
    }

    /// Overrides one field. The value is read as JSON when possible and as a
    /// plain string otherwise, so `d=32`, `annotate=true` and
    /// `token_encoder=bpe` all work.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config serialises to an object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown setting {key:?}")));
        }
        let v = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        map.insert(key.to_string(), v);
        *self = serde_json::from_value(obj)
            .map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Reads a JSON object or `key=value` lines (`#` starts a comment) on
    /// top of the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()));
        }
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                cfg.apply(line)?;
            }
        }
        Ok(cfg)
    }

    /// Short architecture tag such as `subtoken/gru+recv/stan`.
    pub fn describe(&self) -> String {
        let recv = if self.annotate { "+recv" } else { "" };
        format!(
            "{}/{}{}/{}",
            self.token_encoder, self.context_encoder, recv, self.provider
        )
    }
}
