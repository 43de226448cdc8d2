//! Run configuration: a TOML file with sections, overridden by flags.
//!
//! ```toml
//! [data]
//! train = "data/gowalla/train.txt"
//! test = "data/gowalla/test.txt"
//! format = "adjacency"        # or "pairs"
//!
//! [train]
//! emb_dim = 128
//! num_negatives = 64
//! learning_rate = 0.05
//! epochs = 100
//! threads = 1                 # HEAT_THREADS overrides, --threads overrides both
//! similarity = "cosine"       # or "dot"
//! mu = 1.0
//! theta = 0.8
//! l2_reg = 0.0
//! seed = 0
//! init = "normal"             # or "xavier"
//! init_mean = 0.0
//! init_std = 0.01
//!
//! [sampler]
//! kind = "uniform"            # or "tiling"
//! tile = 1024
//! interval = 4096
//!
//! [aggregator]
//! enabled = false
//! gamma = 0.5
//! max_history = 100
//! mini_batch = 32
//! propagate_history = false
//! # learning_rate = 0.05      # defaults to [train].learning_rate
//!
//! [run]
//! output_dir = "runs/latest"
//! eval_interval = 0           # 0: evaluate only at the end
//! eval_k = 20
//! save_best = true
//!
//! [tune]
//! expected_speedup = 1.5
//! # l2_bytes / l3_bytes default to the detected caches
//! latency_mem = 100.0
//! latency_l3 = 20.0
//! latency_l2 = 5.0
//! num_positives = 1
//! positive_hit_ratio = 0.0
//!
//! [bench]
//! samplers = ["uniform", "tiling"]
//! aggregator = [false]
//! mini_batches = [32]
//! threads = [1, 2, 4, 8]
//! warmup_epochs = 1
//! epochs = 3
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use heat_core::aggregator::AggregatorConfig;
use heat_core::bench::BenchPlan;
use heat_core::dataset::Format;
use heat_core::embedding::InitKind;
use heat_core::kernels::{LossParams, Similarity};
use heat_core::sampler::SamplerKind;
use heat_core::trainer::TrainingConfig;

pub const THREADS_ENV: &str = "HEAT_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub aggregator: AggregatorConfig,
    pub run: RunSection,
    pub tune: TuneSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: Format,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: None,
            test: None,
            format: Format::Adjacency,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitName {
    Normal,
    Xavier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub emb_dim: usize,
    pub num_negatives: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub threads: usize,
    pub similarity: Similarity,
    pub mu: f64,
    pub theta: f64,
    pub l2_reg: f64,
    pub seed: u64,
    pub init: InitName,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        let (init_mean, init_std) = match d.init {
            InitKind::Normal { mean, std } => (mean, std),
            InitKind::Xavier => (0.0, 0.01),
        };
        TrainSection {
            emb_dim: d.emb_dim,
            num_negatives: d.num_negatives,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            threads: d.num_threads,
            similarity: d.similarity,
            mu: d.loss.mu,
            theta: d.loss.theta,
            l2_reg: d.l2_reg,
            seed: d.seed,
            init: InitName::Normal,
            init_mean,
            init_std,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerName {
    Uniform,
    Tiling,
}

impl std::str::FromStr for SamplerName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(SamplerName::Uniform),
            "tiling" => Ok(SamplerName::Tiling),
            other => Err(format!("unknown sampler '{other}' (expected uniform or tiling)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerName,
    pub tile: usize,
    pub interval: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerName::Uniform,
            tile: 1024,
            interval: 4096,
        }
    }
}

impl SamplerSection {
    pub fn to_kind(&self, name: SamplerName) -> SamplerKind {
        match name {
            SamplerName::Uniform => SamplerKind::Uniform,
            SamplerName::Tiling => SamplerKind::Tiling {
                tile: self.tile,
                interval: self.interval,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    pub eval_interval: usize,
    pub eval_k: usize,
    pub save_best: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            output_dir: PathBuf::from("runs/latest"),
            eval_interval: 0,
            eval_k: 20,
            save_best: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub expected_speedup: f64,
    pub l2_bytes: Option<u64>,
    pub l3_bytes: Option<u64>,
    pub latency_mem: f64,
    pub latency_l3: f64,
    pub latency_l2: f64,
    pub num_positives: u64,
    pub positive_hit_ratio: f64,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            expected_speedup: 1.5,
            l2_bytes: None,
            l3_bytes: None,
            latency_mem: 100.0,
            latency_l3: 20.0,
            latency_l2: 5.0,
            num_positives: 1,
            positive_hit_ratio: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub samplers: Vec<SamplerName>,
    pub aggregator: Vec<bool>,
    pub mini_batches: Vec<usize>,
    pub threads: Vec<usize>,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            samplers: vec![SamplerName::Uniform, SamplerName::Tiling],
            aggregator: vec![false],
            mini_batches: vec![32],
            threads: vec![1, 2, 4, 8],
            warmup_epochs: 1,
            epochs: 3,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Applies `HEAT_THREADS` from the environment; flags are applied after this.
    pub fn apply_env(&mut self) -> anyhow::Result<()> {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            self.train.threads = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV} must be a positive integer, got '{v}'"))?;
        }
        Ok(())
    }

    pub fn training_config(&self) -> anyhow::Result<TrainingConfig> {
        let t = &self.train;
        let init = match t.init {
            InitName::Normal => InitKind::Normal {
                mean: t.init_mean,
                std: t.init_std,
            },
            InitName::Xavier => InitKind::Xavier,
        };
        let cfg = TrainingConfig {
            emb_dim: t.emb_dim,
            num_negatives: t.num_negatives,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            num_threads: t.threads,
            similarity: t.similarity,
            loss: LossParams {
                mu: t.mu,
                theta: t.theta,
            },
            sampler: self.sampler.to_kind(self.sampler.kind),
            aggregator: self.aggregator,
            seed: t.seed,
            l2_reg: t.l2_reg,
            init,
        };
        cfg.validate()?;
        if t.init == InitName::Normal && t.init_std.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            bail!("init_std must be > 0");
        }
        Ok(cfg)
    }

    pub fn bench_plan(&self) -> anyhow::Result<BenchPlan> {
        let b = &self.bench;
        let plan = BenchPlan {
            samplers: b.samplers.iter().map(|&s| self.sampler.to_kind(s)).collect(),
            aggregator: b.aggregator.clone(),
            mini_batches: b.mini_batches.clone(),
            threads: b.threads.clone(),
            warmup_epochs: b.warmup_epochs,
            epochs: b.epochs,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn train_path(&self) -> anyhow::Result<&Path> {
        existing(self.data.train.as_deref(), "train")
    }

    pub fn test_path(&self) -> anyhow::Result<&Path> {
        existing(self.data.test.as_deref(), "test")
    }
}

fn existing<'a>(p: Option<&'a Path>, which: &str) -> anyhow::Result<&'a Path> {
    match p {
        None => bail!("no {which} dataset given (use --{which} or [data].{which})"),
        Some(p) if !p.is_file() => bail!("dataset not found: {}", p.display()),
        Some(p) => Ok(p),
    }
}
