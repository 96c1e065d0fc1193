//! The complete reranker: token encoder, context encoder and dot-product
//! ranker sharing one parameter store.

mod config;
mod io;
mod ranking;

pub use config::{ContextEncoderKind, ProviderKind, TokenEncoderKind, TrainConfig};
pub use io::{atomic_write, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use ranking::{RankedSuggestions, Suggestion};

use std::borrow::Cow;
use std::collections::HashMap;

use ncc_tensor::{Graph, NodeId, ParamId, ParamStore, Scalar, SegmentIndex, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::CompletionInstance;
use crate::encoders::{glorot, ContextEncoder, EncodingCache, TokenArtifacts, TokenEncoder};
use crate::providers::{provide_inbatch_distractors, VocabProvider};
use crate::{Error, Result};

/// One scoring problem: a context, its receiver flags, the candidates and
/// (when known and present) the target's position among them.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<'a> {
    pub context: Cow<'a, [String]>,
    pub receiver: Vec<bool>,
    pub candidates: Cow<'a, [String]>,
    pub target: Option<usize>,
}

/// Flat scores of a batch: one row per (instance, candidate) pair, grouped
/// by `segments`.
#[derive(Clone, Debug)]
pub struct BatchScores {
    pub logits: NodeId,
    pub segments: SegmentIndex,
    /// Start of each instance's candidates in the flat list.
    pub offsets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CompletionModel<S: Scalar = f32> {
    config: TrainConfig,
    token: TokenEncoder,
    context: ContextEncoder,
    rank_w: ParamId,
    rank_b: Option<ParamId>,
    vocab: Option<VocabProvider>,
    params: ParamStore<S>,
}

/// Weighted token counts over contexts and candidates, the corpus the
/// tokenizer artifacts are fitted on.
pub fn token_counts(instances: &[CompletionInstance]) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for inst in instances {
        for t in inst.context_tokens.iter().chain(&inst.candidates) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
    v.sort();
    v
}

impl<S: Scalar> CompletionModel<S> {
    /// Fits tokenizer artifacts (and the vocabulary provider when
    /// configured) on `train` and initialises all parameters from the seed.
    pub fn build(config: &TrainConfig, train: &[CompletionInstance]) -> Result<Self> {
        config.validate()?;
        let counts = token_counts(train);
        let artifacts = TokenArtifacts::fit(config, counts.iter().map(|(t, c)| (t.as_str(), *c)))?;
        let vocab = (config.provider == ProviderKind::Vocab)
            .then(|| VocabProvider::build(train.iter().map(|i| i.target.as_str()), config.vocab_targets));
        Self::from_parts(config, artifacts, vocab)
    }

    /// Initialises parameters for given artifacts.
    pub fn from_parts(config: &TrainConfig, artifacts: TokenArtifacts, vocab: Option<VocabProvider>) -> Result<Self> {
        config.validate()?;
        if artifacts.kind() != config.token_encoder {
            return Err(Error::Config(format!(
                "artifacts for {} do not match token_encoder {}",
                artifacts.kind(),
                config.token_encoder
            )));
        }
        if (config.provider == ProviderKind::Vocab) != vocab.is_some() {
            return Err(Error::Config("a vocabulary provider is required exactly for provider=vocab".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        TokenEncoder::init(&artifacts, config, &mut params, &mut rng);
        ContextEncoder::init(config, &mut params, &mut rng);
        params.add("rank.w", glorot(config.h, config.d, &mut rng));
        if let Some(v) = &vocab {
            params.add("rank.b", Tensor::zeros(v.len().max(1), 1));
        }
        Self::assemble(config.clone(), artifacts, vocab, params)
    }

    /// Binds components to an existing parameter store.
    pub(crate) fn assemble(
        config: TrainConfig,
        artifacts: TokenArtifacts,
        vocab: Option<VocabProvider>,
        params: ParamStore<S>,
    ) -> Result<Self> {
        config.validate()?;
        let token = TokenEncoder::bind(artifacts, &config, &params)?;
        let context = ContextEncoder::bind(&config, &params)?;
        let rank_w = crate::encoders::lookup(&params, "rank.w")?;
        let rank_b = params.id("rank.b");
        if rank_b.is_some() != vocab.is_some() {
            return Err(Error::Format("ranker bias present without a vocabulary provider or vice versa".into()));
        }
        if let Some(v) = &vocab {
            let b = rank_b.expect("checked above");
            if params.get(b).shape() != [v.len().max(1), 1] {
                return Err(Error::Format("ranker bias does not match the vocabulary provider".into()));
            }
        }
        for (_, name, t) in params.iter() {
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter {name} has non-finite values")));
            }
        }
        Ok(Self {
            config,
            token,
            context,
            rank_w,
            rank_b,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn token_encoder(&self) -> &TokenEncoder {
        &self.token
    }

    pub fn context_encoder(&self) -> &ContextEncoder {
        &self.context
    }

    pub fn vocab_provider(&self) -> Option<&VocabProvider> {
        self.vocab.as_ref()
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn ranker_weight(&self) -> ParamId {
        self.rank_w
    }

    pub fn ranker_bias(&self) -> Option<ParamId> {
        self.rank_b
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Bytes needed to store every parameter as a float32.
    pub fn size_bytes(&self) -> usize {
        4 * self.num_params()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<T: Scalar>(&self) -> CompletionModel<T> {
        CompletionModel {
            config: self.config.clone(),
            token: self.token.clone(),
            context: self.context.clone(),
            rank_w: self.rank_w,
            rank_b: self.rank_b,
            vocab: self.vocab.clone(),
            params: self.params.cast(),
        }
    }

    /// Content hash of the serialised model, as 16 hex digits.
    pub fn model_id(&self) -> String {
        let bytes = io::to_bytes(&self.cast::<f32>());
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn context_view<'a>(&self, context: &'a [String], receiver: &[bool]) -> (Cow<'a, [String]>, Vec<bool>) {
        if context.is_empty() {
            // Nothing precedes the completion point; encode a single empty
            // token so every encoder has a sequence to work on.
            return (Cow::Owned(vec![String::new()]), vec![false]);
        }
        let start = context.len().saturating_sub(self.config.context_size);
        let mut bits = receiver.get(start..).unwrap_or(&[]).to_vec();
        bits.resize(context.len() - start, false);
        (Cow::Borrowed(&context[start..]), bits)
    }

    /// Scoring problem with explicit candidates.
    pub fn example<'a>(&self, context: &'a [String], receiver: &[bool], candidates: &'a [String], target: Option<&str>) -> Example<'a> {
        let (context, receiver) = self.context_view(context, receiver);
        Example {
            context,
            receiver,
            target: target.and_then(|t| candidates.iter().position(|c| c == t)),
            candidates: Cow::Borrowed(candidates),
        }
    }

    /// Scoring problem as used for evaluation: the vocabulary provider's
    /// list for vocab models, the recorded candidates otherwise.
    pub fn eval_example<'a>(&'a self, inst: &'a CompletionInstance) -> Example<'a> {
        let bits = inst.receiver_bits();
        let candidates: &'a [String] = match &self.vocab {
            Some(v) => v.targets(),
            None => &inst.candidates,
        };
        self.example(&inst.context_tokens, &bits, candidates, Some(&inst.target))
    }

    /// Scoring problems for a training batch under the configured provider.
    /// Instances whose target the provider cannot offer are skipped.
    pub fn training_examples<'a>(&'a self, batch: &[&'a CompletionInstance]) -> Result<Vec<Example<'a>>> {
        match self.config.provider {
            ProviderKind::Inbatch => {
                let sets = provide_inbatch_distractors(batch)?;
                Ok(batch
                    .iter()
                    .zip(sets)
                    .map(|(inst, set)| {
                        let bits = inst.receiver_bits();
                        let (context, receiver) = self.context_view(&inst.context_tokens, &bits);
                        Example {
                            context,
                            receiver,
                            target: set.candidates.iter().position(|c| *c == inst.target),
                            candidates: Cow::Owned(set.candidates),
                        }
                    })
                    .collect())
            }
            _ => Ok(batch
                .iter()
                .map(|i| self.eval_example(i))
                .filter(|e| e.target.is_some())
                .collect()),
        }
    }

    /// Builds the flat candidate scores of a batch. With a cache, token
    /// encodings are read from (and added to) it instead of being part of
    /// the graph.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        examples: &[Example<'_>],
        cache: Option<&mut EncodingCache<S>>,
    ) -> Result<BatchScores> {
        if examples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut uniq: Vec<&str> = Vec::new();
        let mut seqs = Vec::with_capacity(examples.len());
        let mut cand_rows = Vec::new();
        let mut origin = Vec::new();
        let mut offsets = Vec::with_capacity(examples.len());
        for (b, ex) in examples.iter().enumerate() {
            if ex.candidates.is_empty() {
                return Err(Error::Data("empty candidate list".into()));
            }
            let mut seq = Vec::with_capacity(ex.context.len());
            for t in ex.context.iter() {
                let next = uniq.len();
                let i = *index.entry(t.as_str()).or_insert(next);
                if i == next {
                    uniq.push(t.as_str());
                }
                seq.push(i);
            }
            seqs.push(seq);
            offsets.push(cand_rows.len());
            for c in ex.candidates.iter() {
                let next = uniq.len();
                let i = *index.entry(c.as_str()).or_insert(next);
                if i == next {
                    uniq.push(c.as_str());
                }
                cand_rows.push(i);
                origin.push(b);
            }
        }
        let n = uniq.len();

        let enc = match cache {
            None => self.token.encode(g, store, &uniq)?,
            Some(cache) => {
                let missing: Vec<&str> = uniq.iter().copied().filter(|t| !cache.contains(t)).collect();
                if !missing.is_empty() {
                    let mut tg = Graph::new();
                    let m = self.token.encode(&mut tg, store, &missing)?;
                    for (r, t) in missing.iter().enumerate() {
                        cache.insert(t, tg.value(m).row(r).to_vec());
                    }
                }
                let d = self.token.dim();
                let mut data = Vec::with_capacity(n * d);
                for t in &uniq {
                    match cache.get(t) {
                        Some(v) => data.extend_from_slice(v),
                        None => {
                            // Capacity below the batch's token count: encode directly.
                            data.extend(self.token.encode_one(store, t)?);
                        }
                    }
                }
                g.constant(Tensor::new(n, d, data)?)?
            }
        };

        let inputs = if self.config.annotate {
            let zeros = g.constant(Tensor::zeros(n, 1))?;
            let ones = g.constant(Tensor::filled(n, 1, S::one()))?;
            let plain = g.concat_cols(&[enc, zeros])?;
            let marked = g.concat_cols(&[enc, ones])?;
            for (seq, ex) in seqs.iter_mut().zip(examples) {
                for (i, &bit) in seq.iter_mut().zip(&ex.receiver) {
                    if bit {
                        *i += n;
                    }
                }
            }
            g.concat_rows(&[plain, marked])?
        } else {
            enc
        };

        let ctx = self.context.encode(g, store, inputs, &seqs)?;
        let w = g.param(store, self.rank_w)?;
        let projected = g.matmul(ctx, w)?;
        let pg = g.gather_rows(projected, &origin)?;
        let eg = g.gather_rows(enc, &cand_rows)?;
        let prod = g.mul(pg, eg)?;
        let mut logits = g.row_sum(prod)?;
        if let (Some(b), Some(vocab)) = (self.rank_b, &self.vocab) {
            let bias = g.param(store, b)?;
            let zero = g.constant(Tensor::zeros(1, 1))?;
            let padded = g.concat_rows(&[bias, zero])?;
            let rows = g.value(bias).rows();
            let idx: Vec<usize> = examples
                .iter()
                .flat_map(|ex| ex.candidates.iter())
                .map(|c| vocab.position(c).unwrap_or(rows))
                .collect();
            let gathered = g.gather_rows(padded, &idx)?;
            logits = g.add(logits, gathered)?;
        }
        Ok(BatchScores {
            logits,
            segments: SegmentIndex::new(origin, examples.len())?,
            offsets,
        })
    }

    /// Mean negative log-likelihood of the targets.
    pub fn batch_loss_with(&self, g: &mut Graph<S>, store: &ParamStore<S>, examples: &[Example<'_>]) -> Result<NodeId> {
        let mut targets = Vec::with_capacity(examples.len());
        let scores = self.forward(g, store, examples, None)?;
        for (ex, &off) in examples.iter().zip(&scores.offsets) {
            let t = ex
                .target
                .ok_or_else(|| Error::Data("target is not among the candidates".into()))?;
            targets.push(off + t);
        }
        let logp = g.segment_log_softmax(scores.logits, &scores.segments)?;
        let picked = g.gather_rows(logp, &targets)?;
        let total = g.sum(picked)?;
        Ok(g.scale(total, -1.0 / examples.len() as f64)?)
    }

    pub fn batch_loss(&self, g: &mut Graph<S>, examples: &[Example<'_>]) -> Result<NodeId> {
        self.batch_loss_with(g, &self.params, examples)
    }

    fn rank_examples(&self, examples: &[Example<'_>], cache: Option<&mut EncodingCache<S>>) -> Result<Vec<RankedSuggestions>> {
        let mut g = Graph::new();
        let scores = self.forward(&mut g, &self.params, examples, cache)?;
        let logits: Vec<f64> = g.value(scores.logits).data().iter().map(|v| v.as_f64()).collect();
        examples
            .iter()
            .zip(&scores.offsets)
            .map(|(ex, &off)| RankedSuggestions::from_logits(&ex.candidates, &logits[off..off + ex.candidates.len()]))
            .collect()
    }

    /// Ranks `candidates` for a context; `receiver[i]` marks tokens bound to
    /// the receiver.
    pub fn rank(&self, context: &[String], receiver: &[bool], candidates: &[String]) -> Result<RankedSuggestions> {
        let ex = self.example(context, receiver, candidates, None);
        Ok(self.rank_examples(&[ex], None)?.remove(0))
    }

    /// [`CompletionModel::rank`] reusing token encodings from `cache`.
    pub fn rank_cached(
        &self,
        cache: &mut EncodingCache<S>,
        context: &[String],
        receiver: &[bool],
        candidates: &[String],
    ) -> Result<RankedSuggestions> {
        let ex = self.example(context, receiver, candidates, None);
        Ok(self.rank_examples(&[ex], Some(cache))?.remove(0))
    }

    /// Ranks instances with their evaluation candidates, in one graph.
    pub fn rank_instances(&self, instances: &[&CompletionInstance]) -> Result<Vec<RankedSuggestions>> {
        let examples: Vec<Example> = instances.iter().map(|i| self.eval_example(i)).collect();
        self.rank_examples(&examples, None)
    }

    pub fn rank_instance(&self, inst: &CompletionInstance) -> Result<RankedSuggestions> {
        Ok(self.rank_instances(&[inst])?.remove(0))
    }

    /// 1-based rank of each target under the evaluation provider, with
    /// `usize::MAX` when the target is not offered at all.
    pub fn target_ranks(&self, instances: &[CompletionInstance], chunk: usize) -> Result<Vec<usize>> {
        let mut ranks = Vec::with_capacity(instances.len());
        for part in instances.chunks(chunk.max(1)) {
            let refs: Vec<&CompletionInstance> = part.iter().collect();
            for (inst, ranked) in part.iter().zip(self.rank_instances(&refs)?) {
                ranks.push(ranked.rank_of(&inst.target).unwrap_or(usize::MAX));
            }
        }
        Ok(ranks)
    }

    /// Context encoding `c` for one context.
    pub fn encode_context(&self, context: &[String], receiver: &[bool]) -> Result<Vec<S>> {
        let (context, bits) = self.context_view(context, receiver);
        let refs: Vec<&str> = context.iter().map(String::as_str).collect();
        let mut g = Graph::new();
        let enc = self.token.encode(&mut g, &self.params, &refs)?;
        let mut seq: Vec<usize> = (0..refs.len()).collect();
        let inputs = if self.config.annotate {
            let n = refs.len();
            let zeros = g.constant(Tensor::zeros(n, 1))?;
            let ones = g.constant(Tensor::filled(n, 1, S::one()))?;
            let plain = g.concat_cols(&[enc, zeros])?;
            let marked = g.concat_cols(&[enc, ones])?;
            for (i, &bit) in seq.iter_mut().zip(&bits) {
                if bit {
                    *i += n;
                }
            }
            g.concat_rows(&[plain, marked])?
        } else {
            enc
        };
        let c = self.context.encode(&mut g, &self.params, inputs, &[seq])?;
        Ok(g.value(c).data().to_vec())
    }

    /// Ranks candidates against a precomputed context encoding.
    pub fn score(&self, c: &[S], candidates: &[String]) -> Result<RankedSuggestions> {
        if candidates.is_empty() {
            return Err(Error::Data("no candidates to rank".into()));
        }
        if c.len() != self.config.h {
            return Err(Error::Data(format!("context encoding has width {}, expected {}", c.len(), self.config.h)));
        }
        let mut g = Graph::new();
        let cn = g.constant(Tensor::row_vector(c))?;
        let w = g.param(&self.params, self.rank_w)?;
        let p = g.matmul(cn, w)?;
        let refs: Vec<&str> = candidates.iter().map(String::as_str).collect();
        let e = self.token.encode(&mut g, &self.params, &refs)?;
        let et = g.transpose(e)?;
        let logits = g.matmul(p, et)?;
        let mut out: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
        if let (Some(b), Some(vocab)) = (self.rank_b, &self.vocab) {
            let bias = self.params.get(b);
            for (o, cand) in out.iter_mut().zip(candidates) {
                if let Some(p) = vocab.position(cand) {
                    *o += bias.data()[p].as_f64();
                }
            }
        }
        RankedSuggestions::from_logits(candidates, &out)
    }
}
