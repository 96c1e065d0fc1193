use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use ncc_cli::service::{router, AppState};
use ncc_cli::session::Repl;
use ncc_cli::bundled_api_table;
use ncc_core::corpus::{load_dataset, split_by_file, synth_generate, synth_world, write_dataset, DatasetSplit, SynthSpec};
use ncc_core::eval::{evaluate, expand_grid, run_sweep, write_pareto_csv, EvalReport};
use ncc_core::model::{atomic_write, load_model, save_model, TrainConfig};
use ncc_core::providers::ApiTable;
use ncc_core::train::train_with_log;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ncc", version, about = "Neural reranking of code completion candidates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic completion corpus as JSON lines.
    Synth(SynthArgs),
    /// Train a model and write it to --model.
    Train(TrainArgs),
    /// Evaluate a model on the test part of a dataset.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Sweep(SweepArgs),
    /// Interactive completion prompt.
    Complete(CompleteArgs),
    /// Serve completions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator setting as key=value, or a JSON/key=value file. Repeatable.
    #[arg(long)]
    config: Vec<String>,
    /// Also write the generated API table as JSON.
    #[arg(long)]
    api_table: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training setting as key=value, or a JSON/key=value file. Repeatable.
    #[arg(long)]
    config: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Split seed; use the one the model was trained with.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    latency_reps: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for sweep.jsonl and pareto.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base setting as key=value, or a JSON/key=value file. Repeatable.
    #[arg(long)]
    config: Vec<String>,
    /// Grid axis as key=v1,v2,... Repeatable.
    #[arg(long)]
    grid: Vec<String>,
    #[arg(long, default_value_t = 100)]
    latency_reps: usize,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    model: PathBuf,
    /// Member table JSON; the bundled table is used otherwise.
    #[arg(long)]
    api_table: Option<PathBuf>,
    /// Fixed candidate list, comma separated.
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<String>>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    api_table: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

/// Applies `--config` values: existing files are read whole, anything else
/// must be `key=value`.
fn apply_settings<T: Serialize + DeserializeOwned>(mut value: T, settings: &[String]) -> Result<T> {
    for s in settings {
        let lines: Vec<String> = if Path::new(s).is_file() {
            let text = std::fs::read_to_string(s).with_context(|| format!("reading {s}"))?;
            if text.trim_start().starts_with('{') {
                let patch: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {s}"))?;
                let mut obj = serde_json::to_value(&value)?;
                for (k, v) in patch.as_object().context("config file must hold a JSON object")? {
                    set_field(&mut obj, k, v.clone())?;
                }
                value = serde_json::from_value(obj)?;
                continue;
            }
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            vec![s.clone()]
        };
        for line in lines {
            let (k, v) = line.split_once('=').with_context(|| format!("expected key=value, got {line:?}"))?;
            let parsed = serde_json::from_str(v.trim()).unwrap_or_else(|_| serde_json::Value::String(v.trim().into()));
            let mut obj = serde_json::to_value(&value)?;
            set_field(&mut obj, k.trim(), parsed)?;
            value = serde_json::from_value(obj).with_context(|| format!("invalid value in {line:?}"))?;
        }
    }
    Ok(value)
}

fn set_field(obj: &mut serde_json::Value, key: &str, v: serde_json::Value) -> Result<()> {
    let map = obj.as_object_mut().context("settings must be an object")?;
    if !map.contains_key(key) {
        bail!("unknown setting {key:?}");
    }
    map.insert(key.to_string(), v);
    Ok(())
}

fn load_split(path: &Path, seed: u64) -> Result<DatasetSplit> {
    let data = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(split_by_file(&data, seed)?)
}

fn load_table(path: Option<&Path>) -> Result<ApiTable> {
    match path {
        Some(p) => ApiTable::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(bundled_api_table()),
    }
}

fn print_report(r: &EvalReport) {
    println!("config     {}", r.config);
    println!("model      {}", r.model_id);
    println!("instances  {}", r.instances);
    println!("recall@1   {:.4}", r.recall_at_1);
    println!("recall@5   {:.4}", r.recall_at_5);
    println!("mrr        {:.4}", r.mrr);
    println!("params     {}", r.params);
    println!("bytes      {}", r.size_bytes);
    if let Some(l) = &r.latency {
        println!(
            "latency    mean {:.3} ms, std {:.3}, p50 {:.3}, p95 {:.3} ({} runs)",
            l.mean_ms, l.std_ms, l.p50_ms, l.p95_ms, l.count
        );
    }
    if let Some(p) = &r.popularity {
        println!("popularity recall@1 {:.4} recall@5 {:.4} mrr {:.4}", p.recall_at_1, p.recall_at_5, p.mrr);
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = apply_settings(SynthSpec { seed: a.seed, ..SynthSpec::default() }, &a.config)?;
    let data = synth_generate(&spec)?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data)?;
    atomic_write(&a.out, &buf)?;
    if let Some(p) = &a.api_table {
        let table: std::collections::BTreeMap<_, _> = synth_world(&spec)?.api_table().into_iter().collect();
        atomic_write(p, &serde_json::to_vec_pretty(&table)?)?;
    }
    eprintln!("wrote {} instances to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = apply_settings(TrainConfig { seed: a.seed, ..TrainConfig::default() }, &a.config)?;
    config.validate()?;
    let split = load_split(&a.data, a.seed)?;
    eprintln!(
        "training {} on {} instances ({} validation)",
        config.describe(),
        split.train.len(),
        split.valid.len()
    );
    eprintln!("epoch loss valid_mrr");
    let out = train_with_log(&config, &split, &mut std::io::stderr())?;
    save_model(&out.model, &a.model)?;
    eprintln!(
        "best epoch {}; wrote {} ({} params, id {})",
        out.best_epoch,
        a.model.display(),
        out.model.num_params(),
        out.model.model_id()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let split = load_split(&a.data, a.seed)?;
    let test = if split.test.is_empty() { &split.valid } else { &split.test };
    let report = evaluate(&model, test, Some(&split.train), a.latency_reps)?;
    print_report(&report);
    if let Some(out) = &a.out {
        atomic_write(out, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = apply_settings(TrainConfig { seed: a.seed, ..TrainConfig::default() }, &a.config)?;
    let mut grid = Vec::new();
    for axis in &a.grid {
        let (k, vs) = axis.split_once('=').with_context(|| format!("expected key=v1,v2, got {axis:?}"))?;
        grid.push((k.trim().to_string(), vs.split(',').map(|v| v.trim().to_string()).collect()));
    }
    let configs = expand_grid(&base, &grid)?;
    if configs.is_empty() {
        bail!("the grid contains no valid configuration");
    }
    let split = load_split(&a.data, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let jsonl = a.out.join("sweep.jsonl");
    let tmp = a.out.join(".sweep.jsonl.partial");
    let mut w = BufWriter::new(File::create(&tmp)?);
    eprintln!("sweeping {} configurations", configs.len());
    let rows = run_sweep(&configs, &split, a.latency_reps, &mut w)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, &jsonl)?;
    let mut csv = Vec::new();
    let front = write_pareto_csv(&rows, &mut csv)?;
    atomic_write(a.out.join("pareto.csv"), &csv)?;
    for r in &rows {
        println!("{:<28} recall@5 {:.4} bytes {:>9}", r.report.config, r.report.recall_at_5, r.report.size_bytes);
    }
    println!("{} of {} configurations on the Pareto front", front.len(), rows.len());
    Ok(())
}

fn cmd_complete(a: CompleteArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let table = load_table(a.api_table.as_deref())?;
    if a.top_k == 0 {
        bail!("--top-k must be positive");
    }
    let mut repl = Repl::new(&model, &table, a.candidates, a.top_k);
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    write!(out, "> ")?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        write!(out, "{}> ", repl.handle_line(&line))?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let table = load_table(a.api_table.as_deref())?;
    let state = Arc::new(AppState::new(model, table, a.top_k));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", a.port))
            .await
            .with_context(|| format!("binding port {}", a.port))?;
        eprintln!("serving model {} on {}", state.model_id, listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Complete(a) => cmd_complete(a),
        Command::Serve(a) => cmd_serve(a),
    }
}
