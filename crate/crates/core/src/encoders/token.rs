use std::collections::HashMap;

use ncc_tensor::{Graph, NodeId, ParamId, ParamStore, Scalar, SegmentIndex, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, lookup, uniform};
use crate::model::{TokenEncoderKind, TrainConfig};
use crate::tokenizers::{
    bpe_train, build_vocab, split_subtokens, BpeModel, CharAlphabet, HashingScheme, Vocabulary,
};
use crate::Result;

/// Tokens shorter than this are right-padded so both char convolutions
/// (widths 3 and 5) have at least one window.
pub const CHAR_MIN_LEN: usize = 7;
/// Longer tokens are cut to their first `CHAR_MAX_LEN` characters.
pub const CHAR_MAX_LEN: usize = 32;
const CHAR_WIDTHS: [usize; 2] = [3, 5];
const EMBED_INIT: f64 = 0.05;

/// The tokenizer state a token encoder depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TokenArtifacts {
    Token { vocab: Vocabulary },
    Subtoken { vocab: Vocabulary },
    Bpe { bpe: BpeModel, vocab: Vocabulary },
    Char { alphabet: CharAlphabet },
    Hashed { scheme: HashingScheme },
}

impl TokenArtifacts {
    /// Learns vocabularies, merges or alphabets from weighted tokens.
    pub fn fit<'a, I>(config: &TrainConfig, tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, usize)>,
    {
        let tokens: Vec<(&str, usize)> = tokens.into_iter().collect();
        let subtoken_counts = || {
            let mut counts: HashMap<String, usize> = HashMap::new();
            for &(t, c) in &tokens {
                for s in split_subtokens(t).into_iter().take(config.max_units) {
                    *counts.entry(s).or_default() += c;
                }
            }
            counts
        };
        Ok(match config.token_encoder {
            TokenEncoderKind::Token => TokenArtifacts::Token {
                vocab: build_vocab(tokens.iter().copied(), config.vocab_size)?,
            },
            TokenEncoderKind::Subtoken => {
                let counts = subtoken_counts();
                TokenArtifacts::Subtoken {
                    vocab: build_vocab(counts.iter().map(|(k, &v)| (k.as_str(), v)), config.vocab_size)?,
                }
            }
            TokenEncoderKind::Bpe => {
                let bpe = bpe_train(tokens.iter().copied(), config.merge_budget);
                let mut counts: HashMap<String, usize> = HashMap::new();
                for &(t, c) in &tokens {
                    for u in bpe.apply(t).into_iter().take(config.max_units) {
                        *counts.entry(u).or_default() += c;
                    }
                }
                let vocab = build_vocab(counts.iter().map(|(k, &v)| (k.as_str(), v)), config.vocab_size)?;
                TokenArtifacts::Bpe { bpe, vocab }
            }
            TokenEncoderKind::Char => TokenArtifacts::Char {
                alphabet: CharAlphabet::build(tokens.iter().copied(), config.alphabet_size),
            },
            TokenEncoderKind::Hashed => TokenArtifacts::Hashed {
                scheme: HashingScheme::new(config.hash_modulus)?,
            },
        })
    }

    pub fn kind(&self) -> TokenEncoderKind {
        match self {
            TokenArtifacts::Token { .. } => TokenEncoderKind::Token,
            TokenArtifacts::Subtoken { .. } => TokenEncoderKind::Subtoken,
            TokenArtifacts::Bpe { .. } => TokenEncoderKind::Bpe,
            TokenArtifacts::Char { .. } => TokenEncoderKind::Char,
            TokenArtifacts::Hashed { .. } => TokenEncoderKind::Hashed,
        }
    }

    /// Restores lookup tables that are not serialised.
    pub fn reindexed(self) -> Self {
        match self {
            TokenArtifacts::Bpe { bpe, vocab } => TokenArtifacts::Bpe {
                bpe: bpe.reindex(),
                vocab,
            },
            other => other,
        }
    }

    /// Rows of the embedding table, or `None` for the char encoder.
    pub fn table_rows(&self) -> Option<usize> {
        match self {
            TokenArtifacts::Token { vocab }
            | TokenArtifacts::Subtoken { vocab }
            | TokenArtifacts::Bpe { vocab, .. } => Some(vocab.len()),
            TokenArtifacts::Hashed { scheme } => Some(scheme.modulus()),
            TokenArtifacts::Char { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum TokenParams {
    Table(ParamId),
    Char {
        conv: [(ParamId, ParamId); 2],
        out: (ParamId, ParamId),
    },
}

/// Maps token strings to `D`-dimensional encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoder {
    artifacts: TokenArtifacts,
    d: usize,
    max_units: usize,
    params: TokenParams,
}

impl TokenEncoder {
    /// Adds freshly initialised parameters to `store`.
    pub fn init<S: Scalar>(
        artifacts: &TokenArtifacts,
        config: &TrainConfig,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) {
        let d = config.d;
        match artifacts {
            TokenArtifacts::Char { alphabet } => {
                let a = alphabet.width();
                let c = config.char_channels;
                store.add("tok.conv0.w", glorot(CHAR_WIDTHS[0] * a, c, rng));
                store.add("tok.conv0.b", Tensor::zeros(1, c));
                store.add("tok.conv1.w", glorot(CHAR_WIDTHS[1] * c, c, rng));
                store.add("tok.conv1.b", Tensor::zeros(1, c));
                store.add("tok.out.w", glorot(c, d, rng));
                store.add("tok.out.b", Tensor::zeros(1, d));
            }
            other => {
                let rows = other.table_rows().expect("lookup encoder");
                store.add("tok.emb", uniform(rows, d, EMBED_INIT, rng));
            }
        }
    }

    /// Resolves the parameters created by [`TokenEncoder::init`].
    pub fn bind<S: Scalar>(
        artifacts: TokenArtifacts,
        config: &TrainConfig,
        store: &ParamStore<S>,
    ) -> Result<Self> {
        let params = match &artifacts {
            TokenArtifacts::Char { .. } => TokenParams::Char {
                conv: [
                    (lookup(store, "tok.conv0.w")?, lookup(store, "tok.conv0.b")?),
                    (lookup(store, "tok.conv1.w")?, lookup(store, "tok.conv1.b")?),
                ],
                out: (lookup(store, "tok.out.w")?, lookup(store, "tok.out.b")?),
            },
            _ => TokenParams::Table(lookup(store, "tok.emb")?),
        };
        Ok(Self {
            artifacts,
            d: config.d,
            max_units: config.max_units,
            params,
        })
    }

    pub fn kind(&self) -> TokenEncoderKind {
        self.artifacts.kind()
    }

    pub fn artifacts(&self) -> &TokenArtifacts {
        &self.artifacts
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Embedding table parameter, if this is a lookup encoder.
    pub fn table(&self) -> Option<ParamId> {
        match self.params {
            TokenParams::Table(id) => Some(id),
            TokenParams::Char { .. } => None,
        }
    }

    /// Row ids (lookup kinds) or character ids (char kind) for `token`.
    pub fn unit_ids(&self, token: &str) -> Vec<usize> {
        let ids: Vec<usize> = match &self.artifacts {
            TokenArtifacts::Token { vocab } => vec![vocab.id(token)],
            TokenArtifacts::Subtoken { vocab } => split_subtokens(token)
                .iter()
                .take(self.max_units)
                .map(|s| vocab.id(s))
                .collect(),
            TokenArtifacts::Bpe { bpe, vocab } => bpe
                .apply(token)
                .iter()
                .take(self.max_units)
                .map(|u| vocab.id(u))
                .collect(),
            TokenArtifacts::Hashed { scheme } => split_subtokens(token)
                .iter()
                .take(self.max_units)
                .map(|s| scheme.id(s))
                .collect(),
            TokenArtifacts::Char { alphabet } => {
                let mut ids: Vec<usize> =
                    token.chars().take(CHAR_MAX_LEN).map(|c| alphabet.id(c)).collect();
                ids.resize(ids.len().max(CHAR_MIN_LEN), alphabet.pad());
                return ids;
            }
        };
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    /// Encodes each token independently into one row of an `n x D` node.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        tokens: &[&str],
    ) -> Result<NodeId> {
        match &self.params {
            TokenParams::Table(emb) => {
                let table = g.param(store, *emb)?;
                let mut flat = Vec::new();
                let mut seg = Vec::new();
                for (i, t) in tokens.iter().enumerate() {
                    let ids = self.unit_ids(t);
                    seg.extend(std::iter::repeat_n(i, ids.len()));
                    flat.extend(ids);
                }
                let rows = g.gather_rows(table, &flat)?;
                if flat.len() == tokens.len() {
                    return Ok(rows);
                }
                let seg = SegmentIndex::new(seg, tokens.len())?;
                Ok(g.segment_max(rows, &seg)?)
            }
            TokenParams::Char { conv, out } => {
                let TokenArtifacts::Char { alphabet } = &self.artifacts else {
                    unreachable!("char parameters imply a char alphabet")
                };
                let width = alphabet.width();
                let mut rows = Vec::with_capacity(tokens.len());
                for t in tokens {
                    let ids = self.unit_ids(t);
                    let mut onehot = Tensor::zeros(ids.len(), width);
                    for (r, &c) in ids.iter().enumerate() {
                        onehot.set(r, c, S::one());
                    }
                    let mut x = g.constant(onehot)?;
                    for (&(w, b), &k) in conv.iter().zip(&CHAR_WIDTHS) {
                        let win = g.unfold(x, k)?;
                        let wn = g.param(store, w)?;
                        let bn = g.param(store, b)?;
                        let y = g.matmul(win, wn)?;
                        let y = g.add_row(y, bn)?;
                        x = g.relu(y)?;
                    }
                    let pooled = g.max_rows(x)?;
                    let wo = g.param(store, out.0)?;
                    let bo = g.param(store, out.1)?;
                    let y = g.matmul(pooled, wo)?;
                    rows.push(g.add_row(y, bo)?);
                }
                Ok(g.concat_rows(&rows)?)
            }
        }
    }

    /// Encoding of one token outside any training graph.
    pub fn encode_one<S: Scalar>(&self, store: &ParamStore<S>, token: &str) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let n = self.encode(&mut g, store, &[token])?;
        Ok(g.value(n).data().to_vec())
    }
}

/// Appends the receiver bit to an encoding.
pub fn annotate<S: Scalar>(encoding: &[S], is_receiver: bool) -> Vec<S> {
    let mut out = encoding.to_vec();
    out.push(if is_receiver { S::one() } else { S::zero() });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kind: TokenEncoderKind, d: usize) -> TrainConfig {
        TrainConfig {
            token_encoder: kind,
            d,
            ..TrainConfig::default()
        }
    }

    fn build(kind: TokenEncoderKind, d: usize, corpus: &[(&str, usize)]) -> (TokenEncoder, ParamStore<f64>) {
        let c = cfg(kind, d);
        let art = TokenArtifacts::fit(&c, corpus.iter().copied()).unwrap();
        let mut store = ParamStore::new();
        TokenEncoder::init(&art, &c, &mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (TokenEncoder::bind(art, &c, &store).unwrap(), store)
    }

    #[test]
    fn token_lookup_returns_rows_and_shared_unk() {
        let (enc, mut store) = build(TokenEncoderKind::Token, 3, &[("dot", 3), ("sum", 2)]);
        let emb = enc.table().unwrap();
        let TokenArtifacts::Token { vocab } = enc.artifacts() else { panic!() };
        let row = vocab.id("dot");
        store.get_mut(emb).row_mut(row).copy_from_slice(&[1.0, 0.0, 0.0]);
        assert_eq!(enc.encode_one(&store, "dot").unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(
            enc.encode_one(&store, "nope").unwrap(),
            enc.encode_one(&store, "other").unwrap()
        );
        assert_eq!(enc.encode_one(&store, "nope").unwrap(), store.get(emb).row(0).to_vec());
    }

    #[test]
    fn subtoken_max_matches_hand_computation() {
        let (enc, mut store) = build(
            TokenEncoderKind::Subtoken,
            2,
            &[("array", 3), ("inner", 2), ("product", 1)],
        );
        let TokenArtifacts::Subtoken { vocab } = enc.artifacts().clone() else { panic!() };
        let emb = enc.table().unwrap();
        for (s, v) in [("array", [1.0, 0.0]), ("inner", [0.0, 1.0]), ("product", [0.5, 0.5])] {
            store.get_mut(emb).row_mut(vocab.id(s)).copy_from_slice(&v);
        }
        assert_eq!(enc.encode_one(&store, "array_inner_product").unwrap(), vec![1.0, 1.0]);
        assert_eq!(enc.encode_one(&store, "productInnerArray").unwrap(), vec![1.0, 1.0]);
        assert_eq!(enc.encode_one(&store, "inner").unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn unit_cap_truncates_the_tail() {
        let (enc, _) = build(TokenEncoderKind::Subtoken, 2, &[("a", 1)]);
        let long = (0..20).map(|i| format!("w{i}")).collect::<Vec<_>>().join("_");
        assert_eq!(enc.unit_ids(&long).len(), 16);
    }

    #[test]
    fn bpe_units_with_equal_multisets_encode_equally() {
        let (enc, store) = build(TokenEncoderKind::Bpe, 4, &[("ab", 5), ("cd", 5)]);
        assert_eq!(enc.unit_ids("ab").len(), 1);
        assert_eq!(
            enc.encode_one(&store, "abcd").unwrap(),
            enc.encode_one(&store, "cdab").unwrap()
        );
    }

    #[test]
    fn char_encoder_has_fixed_width_and_no_table() {
        let (enc, store) = build(TokenEncoderKind::Char, 5, &[("hello", 1), ("x", 1)]);
        assert!(enc.table().is_none());
        for t in ["", "x", "hello_world_and_a_very_long_identifier_name_beyond_the_cap"] {
            let v = enc.encode_one(&store, t).unwrap();
            assert_eq!(v.len(), 5);
            assert_eq!(v, enc.encode_one(&store, t).unwrap());
        }
        assert_eq!(enc.unit_ids("x").len(), CHAR_MIN_LEN);
    }

    #[test]
    fn batch_rows_equal_single_encodings() {
        for kind in [
            TokenEncoderKind::Token,
            TokenEncoderKind::Subtoken,
            TokenEncoderKind::Bpe,
            TokenEncoderKind::Char,
            TokenEncoderKind::Hashed,
        ] {
            let (enc, store) = build(kind, 4, &[("read_file", 2), ("fileName", 1), ("x", 3)]);
            let toks = ["read_file", "x", "unknownThing", "fileName"];
            let mut g = Graph::new();
            let n = enc.encode(&mut g, &store, &toks).unwrap();
            for (i, t) in toks.iter().enumerate() {
                assert_eq!(g.value(n).row(i), enc.encode_one(&store, t).unwrap().as_slice(), "{kind:?}");
            }
        }
    }

    #[test]
    fn annotation_appends_bit() {
        assert_eq!(annotate(&[1.0f32, 2.0], true), vec![1.0, 2.0, 1.0]);
        assert_eq!(annotate(&[1.0f32, 2.0], false), vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn artifacts_roundtrip_through_json() {
        for kind in [TokenEncoderKind::Bpe, TokenEncoderKind::Char, TokenEncoderKind::Hashed] {
            let c = cfg(kind, 4);
            let art = TokenArtifacts::fit(&c, [("read_file", 2), ("read_name", 2)]).unwrap();
            let back: TokenArtifacts = serde_json::from_str(&serde_json::to_string(&art).unwrap()).unwrap();
            assert_eq!(back.reindexed(), art);
        }
    }
}
