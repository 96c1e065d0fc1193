#![allow(dead_code)]

use ncc_core::corpus::{synth_generate, CompletionInstance, SynthSpec};
use ncc_core::model::{CompletionModel, ContextEncoderKind, Example, TokenEncoderKind, TrainConfig};
use ncc_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_corpus(n: usize, seed: u64) -> Vec<CompletionInstance> {
    synth_generate(&SynthSpec {
        n_types: 6,
        methods_per_type: 5,
        n_instances: n,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

/// A configuration small enough for finite differences.
pub fn tiny_config(tok: TokenEncoderKind, ctx: ContextEncoderKind, annotate: bool) -> TrainConfig {
    TrainConfig {
        token_encoder: tok,
        context_encoder: ctx,
        annotate,
        d: 6,
        h: 8,
        heads: 2,
        context_size: 6,
        vocab_size: 200,
        merge_budget: 40,
        hash_modulus: 97,
        alphabet_size: 40,
        char_channels: 4,
        ..TrainConfig::default()
    }
}

/// Replaces every parameter with values from U[-0.5, 0.5], so no bias sits
/// exactly on a relu kink.
pub fn randomize<S: Scalar>(model: &mut CompletionModel<S>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = S::from_f64(rng.gen_range(-0.5..0.5));
        }
    }
}

/// Cross-entropy of one example computed without the batched graph:
/// context vector from the unbatched encoder, candidate encodings one token
/// at a time, and the bilinear score by explicit loops.
pub fn naive_loss(model: &CompletionModel<f64>, ex: &Example<'_>) -> f64 {
    let c = model.encode_context(&ex.context, &ex.receiver).unwrap();
    let w = model.params().get(model.ranker_weight());
    let (h, d) = (w.rows(), w.cols());
    let bias = model.ranker_bias().map(|b| model.params().get(b).data().to_vec());
    let logits: Vec<f64> = ex
        .candidates
        .iter()
        .map(|cand| {
            let e = model.token_encoder().encode_one(model.params(), cand).unwrap();
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..d {
                    s += c[i] * w.data()[i * d + j] * e[j];
                }
            }
            if let (Some(b), Some(v)) = (&bias, model.vocab_provider()) {
                if let Some(p) = v.position(cand) {
                    s += b[p];
                }
            }
            s
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[ex.target.unwrap()]
}

pub const TOKEN_KINDS: [TokenEncoderKind; 4] = [
    TokenEncoderKind::Token,
    TokenEncoderKind::Subtoken,
    TokenEncoderKind::Bpe,
    TokenEncoderKind::Char,
];

pub const CONTEXT_KINDS: [ContextEncoderKind; 4] = [
    ContextEncoderKind::Gru,
    ContextEncoderKind::Bigru,
    ContextEncoderKind::Cnn,
    ContextEncoderKind::Transformer,
];
