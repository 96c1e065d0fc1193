//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use common::*;
use ncc_core::corpus::{split_by_file, synth_generate, CompletionInstance, DatasetSplit, SynthSpec};
use ncc_core::encoders::{TokenArtifacts, TokenEncoder};
use ncc_core::eval::{
    dominates, evaluate, generalization_eval, measure_latency, model_size, mrr, pareto_front, recall_at_k,
    EvalReport, ParetoPoint, MISS,
};
use ncc_core::model::{
    load_model, save_model, CompletionModel, ContextEncoderKind, ProviderKind, TokenEncoderKind, TrainConfig,
};
use ncc_core::providers::coverage_cutoff;
use ncc_core::tokenizers::{build_vocab, split_subtokens};
use ncc_core::train::train;
use ncc_tensor::{grad_check, grad_check_params, Graph, NodeId, ParamStore, SegmentIndex, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

fn note(msg: String) {
    let _ = writeln!(std::io::stdout().lock(), "  .. {msg}");
}

fn base_config() -> TrainConfig {
    TrainConfig {
        d: 32,
        h: 32,
        learning_rate: 5e-3,
        max_epochs: 6,
        patience: 2,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

fn fit(cfg: &TrainConfig, split: &DatasetSplit) -> (CompletionModel, EvalReport) {
    let start = Instant::now();
    let out = train(cfg, split).unwrap();
    let report = evaluate(&out.model, &split.test, Some(&split.train), 0).unwrap();
    note(format!(
        "{} trained in {:.0}s ({} epochs): R@1 {:.4} R@5 {:.4} MRR {:.4}",
        cfg.describe(),
        start.elapsed().as_secs_f64(),
        out.history.len(),
        report.recall_at_1,
        report.recall_at_5,
        report.mrr
    ));
    (out.model, report)
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type OpCase = (&'static str, Tensor<f64>, Box<dyn Fn(&mut Graph<f64>, NodeId) -> ncc_tensor::Result<NodeId>>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_tensor(&mut rng, 4, 6);
    let col = rand_tensor(&mut rng, 6, 1);
    let positive = Tensor::new(4, 6, x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let b = rand_tensor(&mut rng, 6, 3);
    let a = rand_tensor(&mut rng, 2, 4);
    let same = rand_tensor(&mut rng, 4, 6);
    let row = rand_tensor(&mut rng, 1, 6);
    let c4 = rand_tensor(&mut rng, 4, 1);
    let seg = SegmentIndex::new(vec![0, 1, 0, 2], 3).unwrap();
    let seg6 = SegmentIndex::new(vec![0, 0, 1, 2, 2, 2], 3).unwrap();
    let gain = rand_tensor(&mut rng, 1, 6);
    let c = |t: &Tensor<f64>| t.clone();
    let (b2, a2, s2, s3, r2, c42, g2, g3) = (c(&b), c(&a), c(&same), c(&same), c(&row), c(&c4), c(&gain), c(&row));
    let (seg_a, seg_b, seg6a, seg6b) = (seg.clone(), seg.clone(), seg6.clone(), seg6.clone());
    vec![
        ("matmul", c(&x), Box::new(move |g, x| { let k = g.constant(b2.clone())?; g.matmul(x, k) })),
        ("matmul_left", c(&x), Box::new(move |g, x| { let k = g.constant(a2.clone())?; g.matmul(k, x) })),
        ("transpose", c(&x), Box::new(|g, x| g.transpose(x))),
        ("add", c(&x), Box::new(move |g, x| { let k = g.constant(s2.clone())?; g.add(x, k) })),
        ("sub", c(&x), Box::new(move |g, x| { let k = g.constant(s3.clone())?; g.sub(k, x) })),
        ("mul", c(&x), Box::new(|g, x| g.mul(x, x))),
        ("add_row", c(&x), Box::new(move |g, x| { let k = g.constant(r2.clone())?; g.add_row(x, k) })),
        ("mul_col", c(&x), Box::new(move |g, x| { let k = g.constant(c42.clone())?; g.mul_col(x, k) })),
        ("scale", c(&x), Box::new(|g, x| g.scale(x, -1.7))),
        ("sigmoid", c(&x), Box::new(|g, x| g.sigmoid(x))),
        ("tanh", c(&x), Box::new(|g, x| g.tanh(x))),
        ("relu", c(&x), Box::new(|g, x| g.relu(x))),
        ("exp", c(&x), Box::new(|g, x| g.exp(x))),
        ("log", positive, Box::new(|g, x| g.log(x))),
        ("concat_cols", c(&x), Box::new(|g, x| { let t = g.tanh(x)?; g.concat_cols(&[x, t]) })),
        ("concat_rows", c(&x), Box::new(|g, x| { let t = g.sigmoid(x)?; g.concat_rows(&[t, x]) })),
        ("slice_cols", c(&x), Box::new(|g, x| g.slice_cols(x, 2, 3))),
        ("gather_rows", c(&x), Box::new(|g, x| g.gather_rows(x, &[3, 0, 3, 1]))),
        ("select_rows", c(&x), Box::new(|g, x| { let t = g.tanh(x)?; g.select_rows(&[true, false, false, true], x, t) })),
        ("segment_sum", c(&x), Box::new(move |g, x| g.segment_sum(x, &seg_a))),
        ("segment_max", c(&x), Box::new(move |g, x| g.segment_max(x, &seg_b))),
        ("max_rows", c(&x), Box::new(|g, x| g.max_rows(x))),
        ("mean_rows", c(&x), Box::new(|g, x| g.mean_rows(x))),
        ("softmax_rows", c(&x), Box::new(|g, x| g.softmax_rows(x))),
        ("segment_softmax", c(&col), Box::new(move |g, x| g.segment_softmax(x, &seg6a))),
        ("segment_log_softmax", c(&col), Box::new(move |g, x| g.segment_log_softmax(x, &seg6b))),
        ("unfold", c(&x), Box::new(|g, x| g.unfold(x, 3))),
        ("row_sum", c(&x), Box::new(|g, x| g.row_sum(x))),
        ("sum", c(&x), Box::new(|g, x| g.sum(x))),
        ("mean", c(&x), Box::new(|g, x| g.mean(x))),
        ("layer_norm", c(&x), Box::new(move |g, x| {
            let gg = g.constant(g2.clone())?;
            let bb = g.constant(g3.clone())?;
            g.layer_norm(x, gg, bb, 1e-5)
        })),
    ]
}

/// Reduces an op output to a scalar with fixed random weights, so every
/// output entry influences the loss differently.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> ncc_tensor::Result<NodeId> {
    let [r, c] = g.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, r, c))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn gradient_integrity(ledger: &mut Ledger) {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut ok = true;
    for (i, (name, point, f)) in op_cases().into_iter().enumerate() {
        let report = grad_check(|g, x| { let y = f(g, x)?; weighted_sum(g, y, i as u64) }, &point, 1e-6, 1e-4).unwrap();
        ok &= report.passed;
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, format!("op {name} at {}", report.worst));
        }
    }
    let data = small_corpus(80, 17);
    let mut combos = 0;
    for tok in TOKEN_KINDS {
        for ctx in CONTEXT_KINDS {
            let cfg = tiny_config(tok, ctx, combos % 2 == 0);
            let mut model: CompletionModel<f64> = CompletionModel::build(&cfg, &data).unwrap();
            randomize(&mut model, combos as u64);
            let batch: Vec<_> = data.iter().skip(3 * combos).take(4).collect();
            let examples = model.training_examples(&batch).unwrap();
            let report = grad_check_params(
                |g, store: &ParamStore<f64>| Ok(model.batch_loss_with(g, store, &examples).unwrap()),
                model.params(),
                1e-6,
                1e-4,
                6,
            )
            .unwrap();
            ok &= report.passed;
            if report.max_rel_error >= worst.0 {
                worst = (report.max_rel_error, format!("{} at {}", cfg.describe(), report.worst));
            }
            combos += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ledger.record(
        "gradient integrity",
        ok && secs < 120.0,
        format!("31 ops + {combos} model configs, max rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    );
}

fn segment_equivalence(ledger: &mut Ledger) {
    let data = small_corpus(200, 23);
    let pool: Vec<String> = data
        .iter()
        .flat_map(|i| i.candidates.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut models = Vec::new();
    for tok in TOKEN_KINDS {
        for ctx in CONTEXT_KINDS {
            let mut m: CompletionModel<f64> = CompletionModel::build(&tiny_config(tok, ctx, true), &data).unwrap();
            randomize(&mut m, models.len() as u64 + 100);
            models.push(m);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for b in 0..100 {
        let model = &models[b % models.len()];
        let n = rng.gen_range(1..=8);
        let mut owned: Vec<(Vec<String>, Vec<bool>, Vec<String>, String)> = Vec::new();
        for _ in 0..n {
            let inst = &data[rng.gen_range(0..data.len())];
            let m = rng.gen_range(1..=20);
            let mut cands: Vec<String> = Vec::new();
            while cands.len() < m {
                let c = &pool[rng.gen_range(0..pool.len())];
                if !cands.contains(c) {
                    cands.push(c.clone());
                }
            }
            let target = cands[rng.gen_range(0..m)].clone();
            owned.push((inst.context_tokens.clone(), inst.receiver_bits(), cands, target));
        }
        let examples: Vec<_> = owned
            .iter()
            .map(|(ctx, bits, cands, t)| model.example(ctx, bits, cands, Some(t)))
            .collect();
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, &examples).unwrap();
        let batched = g.value(loss).item().unwrap();
        let naive = examples.iter().map(|e| naive_loss(model, e)).sum::<f64>() / n as f64;
        worst = worst.max((batched - naive).abs());
    }
    ledger.record("segment-path equivalence", worst < 1e-6, format!("100 batches, max |batched - unbatched| {worst:.2e}"));
}

fn metric_oracles(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let ranks: Vec<usize> = (0..n).map(|_| if rng.gen_bool(0.1) { MISS } else { rng.gen_range(1..25) }).collect();
        for k in [1, 3, 5, 10] {
            let mut hits = 0usize;
            for &r in &ranks {
                if r != MISS && r <= k {
                    hits += 1;
                }
            }
            ok &= recall_at_k(&ranks, k).unwrap() == hits as f64 / n as f64;
        }
        let mut rr = 0.0;
        for &r in &ranks {
            rr += if r == MISS { 0.0 } else { 1.0 / r as f64 };
        }
        ok &= mrr(&ranks).unwrap() == rr / n as f64;
    }
    let example = mrr(&[1, 2, 4]).unwrap();
    ok &= (example - 0.583_333_333_3).abs() < 1e-9;
    ledger.record("metric oracles", ok, format!("1000 rank lists exact; MRR([1,2,4]) = {example:.9}"));
}

fn size_accounting(ledger: &mut Ledger) {
    let data = small_corpus(120, 31);
    let mut ok = true;
    let mut checked = 0;
    for tok in TOKEN_KINDS.into_iter().chain([TokenEncoderKind::Hashed]) {
        for ctx in CONTEXT_KINDS {
            for annotate in [false, true] {
                for provider in [ProviderKind::Stan, ProviderKind::Vocab] {
                    for layers in [1, 2] {
                        if layers == 2 && ctx == ContextEncoderKind::Bigru {
                            continue;
                        }
                        let cfg = TrainConfig {
                            provider,
                            layers,
                            vocab_targets: 25,
                            ..tiny_config(tok, ctx, annotate)
                        };
                        let model: CompletionModel = CompletionModel::build(&cfg, &data).unwrap();
                        let expect = closed_form(&cfg, &model);
                        let (params, bytes) = model_size(model.params());
                        ok &= params == expect && bytes == 4 * expect && model.num_params() == expect;
                        checked += 1;
                    }
                }
            }
        }
    }
    let units: Vec<String> = (0..12_000).map(|i| format!("t{i}")).collect();
    let vocab = build_vocab(units.iter().map(|u| (u.as_str(), 1)), 10_000).unwrap();
    let cfg = TrainConfig {
        token_encoder: TokenEncoderKind::Token,
        d: 64,
        ..TrainConfig::default()
    };
    let mut store: ParamStore<f32> = ParamStore::new();
    TokenEncoder::init(&TokenArtifacts::Token { vocab }, &cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let example = model_size(&store);
    ok &= example == (640_000, 2_560_000);
    ledger.record(
        "size accounting",
        ok,
        format!("{checked} configurations match closed form; 10000x64 token table -> {} params / {} bytes", example.0, example.1),
    );
}

fn closed_form(cfg: &TrainConfig, model: &CompletionModel) -> usize {
    let (d, h) = (cfg.d, cfg.h);
    let din = d + usize::from(cfg.annotate);
    let token = match model.token_encoder().artifacts() {
        TokenArtifacts::Char { alphabet } => {
            let (a, c) = (alphabet.width(), cfg.char_channels);
            3 * a * c + c + 5 * c * c + c + c * d + d
        }
        other => other.table_rows().unwrap() * d,
    };
    let gru = |i: usize, h: usize| 3 * (h * i + h * h + 2 * h);
    let context = match cfg.context_encoder {
        ContextEncoderKind::Gru => gru(din, h) + (cfg.layers - 1) * gru(h, h),
        ContextEncoderKind::Bigru => 2 * gru(din, h / 2),
        ContextEncoderKind::Cnn => cfg.cnn_width * din * h + h + (cfg.layers - 1) * (cfg.cnn_width * h * h + h),
        ContextEncoderKind::Transformer => {
            let block = (3 * h * h + 3 * h) + (h * h + h) + 2 * h + (4 * h * h + 4 * h) + (4 * h * h + h) + 2 * h;
            din * h + h + cfg.layers * block + h * h + h
        }
    };
    let bias = model.vocab_provider().map_or(0, |v| v.len().max(1));
    token + context + h * d + bias
}

fn pareto_correctness(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ok = true;
    for s in 0..1000 {
        let n = rng.gen_range(1..40);
        let pts: Vec<ParetoPoint> = (0..n)
            .map(|i| ParetoPoint {
                recall5: rng.gen_range(0..10) as f64 / 10.0,
                size_bytes: rng.gen_range(1..10) as f64 * 1e6,
                latency_ms: rng.gen_range(1..10) as f64,
                config: format!("{s}-{i}"),
            })
            .collect();
        let front = pareto_front(&pts).unwrap();
        let brute = |p: &ParetoPoint, q: &ParetoPoint| {
            (q.recall5 >= p.recall5 && q.size_bytes <= p.size_bytes && q.latency_ms <= p.latency_ms)
                && (q.recall5 > p.recall5 || q.size_bytes < p.size_bytes || q.latency_ms < p.latency_ms)
        };
        let expect: Vec<&ParetoPoint> = pts.iter().filter(|p| !pts.iter().any(|q| brute(p, q))).collect();
        ok &= front.iter().collect::<Vec<_>>() == expect;
        ok &= front.iter().all(|p| !front.iter().any(|q| dominates(q, p)));
        ok &= pareto_front(&front).unwrap() == front;
    }
    ledger.record("pareto correctness", ok, "1000 random point sets: dominance-free, matches brute force, idempotent".into());
}

fn serialization(ledger: &mut Ledger, model: &CompletionModel, test: &[CompletionInstance]) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ncc");
    save_model(model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = loaded.model_id() == model.model_id();
    for _ in 0..100 {
        let inst = &test[rng.gen_range(0..test.len())];
        let a = model.rank_instance(inst).unwrap();
        let b = loaded.rank_instance(inst).unwrap();
        ok &= a.items.iter().zip(&b.items).all(|(x, y)| x.candidate == y.candidate && x.probability.to_bits() == y.probability.to_bits());
    }
    ledger.record("serialization", ok, format!("100 instances bit-identical after save/load, model {}", model.model_id()));
}

fn latency(ledger: &mut Ledger, data: &[CompletionInstance]) {
    let cfg = TrainConfig {
        d: 64,
        h: 64,
        context_size: 80,
        ..TrainConfig::default()
    };
    let model: CompletionModel = CompletionModel::build(&cfg, &data[..2000]).unwrap();
    let probes: Vec<CompletionInstance> = data
        .iter()
        .take(200)
        .map(|i| {
            let mut i = i.clone();
            if !i.candidates[..10].contains(&i.target) {
                i.candidates[9] = i.target.clone();
            }
            i.candidates.truncate(10);
            i
        })
        .collect();
    let stats = measure_latency(&model, &probes, 200).unwrap();
    ledger.record(
        "latency protocol",
        stats.p95_ms < 50.0 && stats.count >= 100 && stats.warmup >= 10,
        format!(
            "{}, D=H=64, N=80, 10 candidates: mean {:.3} ms, p50 {:.3} ms, p95 {:.3} ms over {} runs",
            cfg.describe(),
            stats.mean_ms,
            stats.p50_ms,
            stats.p95_ms,
            stats.count
        ),
    );
}

fn distinct_subtokens(instances: &[CompletionInstance]) -> usize {
    let mut seen = HashSet::new();
    for i in instances {
        for t in i.context_tokens.iter().chain(&i.candidates) {
            for s in split_subtokens(t) {
                seen.insert(s);
            }
        }
    }
    seen.len()
}

#[test]
fn acceptance() {
    let mut ledger = Ledger { failed: Vec::new() };
    let started = Instant::now();

    gradient_integrity(&mut ledger);
    segment_equivalence(&mut ledger);
    metric_oracles(&mut ledger);
    size_accounting(&mut ledger);
    pareto_correctness(&mut ledger);

    let data = synth_generate(&SynthSpec::default()).unwrap();
    let split = split_by_file(&data, 0).unwrap();
    latency(&mut ledger, &data);

    let base = base_config();
    let (subtoken, sub_report) = fit(&base, &split);
    serialization(&mut ledger, &subtoken, &split.test);

    let pop = sub_report.popularity.clone().unwrap();
    ledger.record(
        "directional (a) subtoken beats popularity",
        sub_report.recall_at_1 - pop.recall_at_1 >= 0.10,
        format!("R@1 {:.4} vs popularity {:.4}", sub_report.recall_at_1, pop.recall_at_1),
    );

    let v_max = coverage_cutoff(split.train.iter().map(|i| i.target.as_str()), 0.5);
    let token = TrainConfig { token_encoder: TokenEncoderKind::Token, ..base.clone() };
    let (_, token_stan) = fit(&token, &split);
    let token_vocab_cfg = TrainConfig { provider: ProviderKind::Vocab, vocab_targets: v_max, ..token.clone() };
    let (_, token_vocab) = fit(&token_vocab_cfg, &split);
    ledger.record(
        "directional (b) stan >= vocab",
        token_stan.recall_at_5 >= token_vocab.recall_at_5,
        format!("R@5 stan {:.4} vs vocab {:.4} (V_max {v_max} at 50% coverage)", token_stan.recall_at_5, token_vocab.recall_at_5),
    );

    let seq_data = synth_generate(&SynthSpec { sequential_strength: 0.9, ..SynthSpec::default() }).unwrap();
    let seq_split = split_by_file(&seq_data, 0).unwrap();
    let (_, plain) = fit(&base, &seq_split);
    let (_, marked) = fit(&TrainConfig { annotate: true, ..base.clone() }, &seq_split);
    ledger.record(
        "directional (c) annotation does not hurt",
        marked.mrr >= plain.mrr - 0.01,
        format!("MRR gru+recv {:.4} vs gru {:.4}", marked.mrr, plain.mrr),
    );

    let held = split.hold_out_library("lib0").unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for tok in [TokenEncoderKind::Subtoken, TokenEncoderKind::Bpe] {
        let cfg = TrainConfig { token_encoder: tok, ..base.clone() };
        let (model, _) = fit(&cfg, &held);
        let r = generalization_eval(&model, &held.test, "lib0", 0).unwrap();
        let random = r.random.as_ref().unwrap().mrr;
        ok &= r.mrr > random + 0.05;
        detail.push(format!("{tok} MRR {:.4} vs random {:.4}", r.mrr, random));
    }
    let vocab_cfg = TrainConfig {
        token_encoder: TokenEncoderKind::Token,
        provider: ProviderKind::Vocab,
        vocab_targets: 10_000,
        ..base.clone()
    };
    let (vocab_model, _) = fit(&vocab_cfg, &held);
    let known = vocab_model.vocab_provider().unwrap();
    let oov: Vec<CompletionInstance> = held.test.iter().filter(|i| known.position(&i.target).is_none()).cloned().collect();
    let oov_r5 = recall_at_k(&vocab_model.target_ranks(&oov, 256).unwrap(), 5).unwrap();
    ok &= !oov.is_empty() && oov_r5 == 0.0;
    detail.push(format!("token/gru/vocab R@5 {oov_r5} on {} out-of-vocabulary targets", oov.len()));
    ledger.record("held-out library generalisation", ok, detail.join("; "));

    let modulus = 4 * distinct_subtokens(&split.train);
    let (_, hashed) = fit(&TrainConfig { token_encoder: TokenEncoderKind::Hashed, hash_modulus: modulus, ..base.clone() }, &split);
    ledger.record(
        "feature hashing",
        (hashed.mrr - sub_report.mrr).abs() <= 0.02,
        format!("MRR hashed(|V|={modulus}) {:.4} vs subtoken {:.4}", hashed.mrr, sub_report.mrr),
    );

    let (_, inbatch) = fit(&TrainConfig { provider: ProviderKind::Inbatch, ..base.clone() }, &split);
    ledger.record(
        "in-batch distractors",
        inbatch.mrr >= sub_report.mrr - 0.08 && inbatch.mrr > pop.mrr,
        format!("MRR in-batch {:.4} vs stan {:.4}, popularity {:.4}", inbatch.mrr, sub_report.mrr, pop.mrr),
    );

    note(format!("acceptance finished in {:.0}s", started.elapsed().as_secs_f64()));
    assert!(ledger.failed.is_empty(), "failed criteria: {:?}", ledger.failed);
}
