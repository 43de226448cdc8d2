//! `heat`: train, evaluate, tune, and benchmark cosine-contrastive MF models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

mod config;
mod manifest;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use heat_core::bench::{run_bench, to_csv, CacheSizes};
use heat_core::checkpoint::load_model;
use heat_core::dataset::{load_split, parse_interactions, InteractionSet};
use heat_core::evaluator::{evaluate, EvalConfig};
use heat_core::kernels::Similarity;
use heat_core::sampler::{tune_tiling, TuneInputs};
use heat_core::trainer::{train, EvalKind, Model, TrainEvent, TrainOptions};

use config::{RunConfig, SamplerName};
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "heat", version, about = "Multi-core MF training with cosine contrastive loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints, and a run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print its metrics as JSON.
    Eval(EvalArgs),
    /// Choose a tile size and refresh interval for the tiling sampler.
    Tune(TuneArgs),
    /// Time epochs across samplers, aggregator settings, and thread counts; prints CSV.
    Bench(BenchArgs),
}

#[derive(Args, Default)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Dataset format: adjacency or pairs.
    #[arg(long)]
    format: Option<heat_core::dataset::Format>,
    /// Worker threads (overrides HEAT_THREADS and the config file).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Hyper {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "dim")]
    emb_dim: Option<usize>,
    #[arg(long = "negatives")]
    num_negatives: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// cosine or dot.
    #[arg(long)]
    similarity: Option<Similarity>,
    /// uniform or tiling.
    #[arg(long)]
    sampler: Option<SamplerName>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    interval: Option<usize>,
    /// Enable the behavior-aggregation layer.
    #[arg(long)]
    aggregator: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mini_batch: Option<usize>,
    #[arg(long)]
    max_history: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
    /// Output directory for metrics, checkpoints, and the manifest.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Evaluate every N epochs (0: only at the end).
    #[arg(long)]
    eval_interval: Option<usize>,
    /// Continue from a model checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epochs already completed by the resumed model; read from the
    /// checkpoint's manifest when omitted.
    #[arg(long, requires = "resume")]
    start_epoch: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, short)]
    k: Option<usize>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
    /// Expected overall speedup P.
    #[arg(long = "expected-speedup", short = 'p', allow_negative_numbers = true)]
    expected_speedup: Option<f64>,
    /// Item count, when no training file is given.
    #[arg(long)]
    items: Option<u64>,
    /// Total iterations (pairs x epochs), when no training file is given.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    l2_bytes: Option<u64>,
    #[arg(long)]
    l3_bytes: Option<u64>,
    /// Write the resolved config with the chosen tile and interval to this path.
    #[arg(long)]
    write: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
    /// Thread counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,
    /// Samplers to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    samplers: Option<Vec<SamplerName>>,
    #[arg(long)]
    bench_epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Also write the CSV to this file.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Configuration problems exit with 2, everything else with 3.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn resolve(common: &Common, hyper: Option<&Hyper>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    cfg.apply_env()?;
    if let Some(p) = &common.train {
        cfg.data.train = Some(p.clone());
    }
    if let Some(p) = &common.test {
        cfg.data.test = Some(p.clone());
    }
    if let Some(f) = common.format {
        cfg.data.format = f;
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    if let Some(h) = hyper {
        let t = &mut cfg.train;
        set(&mut t.epochs, h.epochs);
        set(&mut t.seed, h.seed);
        set(&mut t.emb_dim, h.emb_dim);
        set(&mut t.num_negatives, h.num_negatives);
        set(&mut t.learning_rate, h.learning_rate);
        set(&mut t.mu, h.mu);
        set(&mut t.theta, h.theta);
        set(&mut t.similarity, h.similarity);
        set(&mut cfg.sampler.kind, h.sampler);
        set(&mut cfg.sampler.tile, h.tile);
        set(&mut cfg.sampler.interval, h.interval);
        if h.sampler.is_none() && (h.tile.is_some() || h.interval.is_some()) {
            cfg.sampler.kind = SamplerName::Tiling;
        }
        let a = &mut cfg.aggregator;
        a.enabled |= h.aggregator;
        set(&mut a.gamma, h.gamma);
        set(&mut a.mini_batch, h.mini_batch);
        set(&mut a.max_history, h.max_history);
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_data(cfg: &RunConfig) -> Result<(InteractionSet, InteractionSet), Failure> {
    let train_path = cfg.train_path().usage()?;
    let test_path = cfg.test_path().usage()?;
    load_split(train_path, test_path, cfg.data.format)
        .with_context(|| format!("loading {} / {}", train_path.display(), test_path.display()))
        .usage()
}

fn jsonl(path: &Path, append: bool) -> anyhow::Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.common, Some(&a.hyper)).usage()?;
    set(&mut cfg.run.output_dir, a.output);
    set(&mut cfg.run.eval_interval, a.eval_interval);
    let tcfg = cfg.training_config().usage()?;
    let (train_set, test_set) = load_data(&cfg)?;

    let (mut model, start_epoch) = match &a.resume {
        Some(ckpt) => {
            let model = load_model(ckpt)
                .with_context(|| format!("cannot load checkpoint {}", ckpt.display()))
                .usage()?;
            let start = match a.start_epoch {
                Some(s) => s,
                None => Manifest::epochs_completed_near(ckpt).usage()?,
            };
            (model, start)
        }
        None => (
            Model::init(train_set.num_users(), train_set.num_items(), &tcfg).usage()?,
            0,
        ),
    };
    if start_epoch > tcfg.epochs {
        return Err(Failure::Usage(anyhow!(
            "start epoch {start_epoch} is past the configured {} epochs",
            tcfg.epochs
        )));
    }

    let out = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))
        .runtime()?;
    let mut manifest = Manifest::new(&cfg, &train_set, &test_set, a.resume.as_deref(), start_epoch).runtime()?;
    manifest.write(&out).runtime()?;

    let resuming = a.resume.is_some();
    let mut metrics = jsonl(&out.join("metrics.jsonl"), resuming).runtime()?;
    let mut epochs = jsonl(&out.join("epochs.jsonl"), resuming).runtime()?;
    let k = cfg.run.eval_k;
    let opts = TrainOptions {
        eval_interval: cfg.run.eval_interval,
        eval: EvalConfig {
            k,
            similarity: tcfg.similarity,
            num_threads: tcfg.num_threads,
        },
        start_epoch,
        checkpoint_dir: Some(out.clone()),
    };
    let mut io_error: Option<std::io::Error> = None;
    let outcome = train(&mut model, &train_set, &test_set, &tcfg, &opts, |event| {
        let res = match event {
            TrainEvent::Epoch(r) => {
                eprintln!(
                    "epoch {:>4}  loss {:.5}  {:.2}s",
                    r.epoch, r.mean_loss, r.wall_time
                );
                serde_json::to_writer(&mut epochs, r)
                    .map_err(std::io::Error::from)
                    .and_then(|_| writeln!(epochs))
            }
            TrainEvent::Eval(r) => {
                let kind = match r.kind {
                    EvalKind::InRun => "inrun",
                    EvalKind::Final => "final",
                };
                eprintln!(
                    "eval  {:>4}  recall@{k} {:.5}  ndcg@{k} {:.5}",
                    r.epoch, r.metrics.recall_at_k, r.metrics.ndcg_at_k
                );
                let line = json!({
                    "epoch": r.epoch,
                    "kind": kind,
                    format!("recall@{k}"): r.metrics.recall_at_k,
                    format!("ndcg@{k}"): r.metrics.ndcg_at_k,
                    "users": r.metrics.users_evaluated,
                });
                writeln!(metrics, "{line}")
            }
        };
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
    })
    .runtime()?;
    if let Some(e) = io_error {
        return Err(Failure::Runtime(e.into()));
    }
    metrics.flush().runtime()?;
    epochs.flush().runtime()?;
    if !cfg.run.save_best {
        let _ = std::fs::remove_file(out.join("best.ckpt"));
    }
    manifest.finish(outcome.epochs.len() + start_epoch, &outcome.final_metrics);
    manifest.write(&out).runtime()?;
    println!("{}", serde_json::to_string(&outcome.final_metrics).runtime()?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common, None).usage()?;
    let k = a.k.unwrap_or(cfg.run.eval_k);
    if k == 0 {
        return Err(Failure::Usage(anyhow!("k must be >= 1")));
    }
    let (train_set, test_set) = load_data(&cfg)?;
    let model = load_model(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))
        .usage()?;
    let agg_cfg = heat_core::aggregator::AggregatorConfig {
        enabled: model.aggregator.is_some(),
        ..cfg.aggregator
    };
    let eval_cfg = EvalConfig {
        k,
        similarity: cfg.train.similarity,
        num_threads: cfg.train.threads.max(1),
    };
    let report = evaluate(
        &model.users,
        &model.items,
        &train_set,
        &test_set,
        model.aggregator.as_ref().map(|w| (w, &agg_cfg)),
        &eval_cfg,
    )
    .map_err(|e| match e {
        heat_core::Error::InvalidArgument(_) => Failure::Usage(e.into()),
        other => Failure::Runtime(other.into()),
    })?;
    println!("{}", serde_json::to_string(&report).runtime()?);
    Ok(())
}

fn caches(cfg: &RunConfig, l2: Option<u64>, l3: Option<u64>) -> CacheSizes {
    let detected = CacheSizes::detect().unwrap_or(CacheSizes {
        l2: 1 << 20,
        l3: 32 << 20,
    });
    CacheSizes {
        l2: l2.or(cfg.tune.l2_bytes).unwrap_or(detected.l2),
        l3: l3.or(cfg.tune.l3_bytes).unwrap_or(detected.l3),
    }
}

fn cmd_tune(a: TuneArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.common, Some(&a.hyper)).usage()?;
    set(&mut cfg.tune.expected_speedup, a.expected_speedup);
    let tcfg = cfg.training_config().usage()?;
    let (num_items, total_iterations) = match (a.items, a.iterations) {
        (Some(i), Some(m)) => (i, m),
        _ => {
            let path = cfg.train_path().usage()?;
            let train_set = parse_interactions(path, cfg.data.format).usage()?;
            (
                a.items.unwrap_or(train_set.num_items() as u64),
                a.iterations
                    .unwrap_or((train_set.num_pairs() * tcfg.epochs) as u64),
            )
        }
    };
    let sizes = caches(&cfg, a.l2_bytes, a.l3_bytes);
    let inputs = TuneInputs {
        num_items,
        total_iterations,
        num_negatives: tcfg.num_negatives as u64,
        num_positives: cfg.tune.num_positives,
        positive_hit_ratio: cfg.tune.positive_hit_ratio,
        l2_bytes: sizes.l2,
        l3_bytes: sizes.l3,
        latency_mem: cfg.tune.latency_mem,
        latency_l2: cfg.tune.latency_l2,
        latency_l3: cfg.tune.latency_l3,
        expected_speedup: cfg.tune.expected_speedup,
        num_threads: tcfg.num_threads as u64,
        emb_dim: tcfg.emb_dim as u64,
    };
    let t = tune_tiling(&inputs).usage()?;
    let out = json!({
        "n1": t.n1,
        "n2": t.n2,
        "neg_speedup": t.neg_speedup,
        "pos_speedup": t.pos_speedup,
        "tier": t.tier,
        "n20": t.n20,
        "n21": t.n21,
        "alpha": t.estimate.alpha,
        "beta": t.estimate.beta,
        "tile_bytes": t.estimate.tile_bytes,
        "inputs": inputs,
    });
    println!("{}", serde_json::to_string_pretty(&out).runtime()?);
    if let Some(path) = a.write {
        cfg.sampler.kind = SamplerName::Tiling;
        cfg.sampler.tile = t.n1 as usize;
        cfg.sampler.interval = t.n2 as usize;
        let text = toml::to_string(&cfg).runtime()?;
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .runtime()?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.common, Some(&a.hyper)).usage()?;
    set(&mut cfg.bench.threads, a.sweep);
    set(&mut cfg.bench.samplers, a.samplers);
    set(&mut cfg.bench.epochs, a.bench_epochs);
    set(&mut cfg.bench.warmup_epochs, a.warmup_epochs);
    if a.hyper.aggregator {
        cfg.bench.aggregator = vec![true];
    }
    let tcfg = cfg.training_config().usage()?;
    let plan = cfg.bench_plan().usage()?;
    let train_path = cfg.train_path().usage()?;
    let train_set = parse_interactions(train_path, cfg.data.format).usage()?;
    let rows = run_bench(&tcfg, &plan, &train_set, |r| {
        eprintln!(
            "{} threads={} aggregator={} epoch {:.3}s read {:.3}s",
            r.sampler, r.threads, r.aggregator, r.epoch_time, r.phases.read_emb
        );
    })
    .runtime()?;
    for r in rows.iter().filter(|r| r.non_monotone) {
        eprintln!(
            "note: epoch time rose at {} threads ({} sampler, aggregator={})",
            r.threads, r.sampler, r.aggregator
        );
    }
    let csv = to_csv(&rows);
    print!("{csv}");
    if let Some(path) = a.output {
        std::fs::write(&path, &csv)
            .with_context(|| format!("cannot write {}", path.display()))
            .runtime()?;
    }
    Ok(())
}
