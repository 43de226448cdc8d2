//! Per-phase epoch timing across sampler, aggregator, and thread settings.

use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::sampler::SamplerKind;
use crate::trainer::{train_model_epoch, Model, PhaseTimes, TrainingConfig};
use crate::{Error, Result};

/// Per-core L2 and shared last-level cache sizes in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSizes {
    pub l2: u64,
    pub l3: u64,
}

impl CacheSizes {
    /// Reads cpu0's unified caches from sysfs. Machines without an L3 report
    /// their L2 as the last level.
    pub fn detect() -> Option<CacheSizes> {
        let base = std::path::Path::new("/sys/devices/system/cpu/cpu0/cache");
        let mut l2 = None;
        let mut l3 = None;
        for entry in std::fs::read_dir(base).ok()?.flatten() {
            let read = |f: &str| std::fs::read_to_string(entry.path().join(f)).ok();
            let (Some(level), Some(kind), Some(size)) = (read("level"), read("type"), read("size")) else {
                continue;
            };
            if kind.trim() == "Instruction" {
                continue;
            }
            let Some(bytes) = parse_size(size.trim()) else { continue };
            match level.trim() {
                "2" => l2 = Some(bytes),
                "3" => l3 = Some(bytes),
                _ => {}
            }
        }
        let l2 = l2?;
        Some(CacheSizes { l2, l3: l3.unwrap_or(l2) })
    }
}

fn parse_size(s: &str) -> Option<u64> {
    let (num, mult) = match s.as_bytes().last()? {
        b'K' => (&s[..s.len() - 1], 1 << 10),
        b'M' => (&s[..s.len() - 1], 1 << 20),
        b'G' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>().ok().map(|n| n * mult)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchPlan {
    pub samplers: Vec<SamplerKind>,
    pub aggregator: Vec<bool>,
    /// Aggregator mini-batch sizes; ignored for rows with the aggregator off.
    pub mini_batches: Vec<usize>,
    pub threads: Vec<usize>,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            samplers: vec![SamplerKind::Uniform],
            aggregator: vec![false],
            mini_batches: vec![32],
            threads: vec![1],
            warmup_epochs: 1,
            epochs: 3,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.samplers.is_empty() || self.aggregator.is_empty() || self.threads.is_empty() {
            return Err(Error::invalid("bench plan has an empty sweep axis"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("bench needs at least one measured epoch"));
        }
        if self.threads.contains(&0) {
            return Err(Error::invalid("thread counts must be >= 1"));
        }
        if self.aggregator.contains(&true) && (self.mini_batches.is_empty() || self.mini_batches.contains(&0)) {
            return Err(Error::invalid("aggregator rows need mini-batch sizes >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sampler: String,
    pub tile: usize,
    pub interval: usize,
    pub aggregator: bool,
    pub mini_batch: usize,
    pub threads: usize,
    pub epoch_time: f64,
    pub phases: PhaseTimes,
    pub mean_loss: f64,
    /// Epoch-time speedup over the first thread count of the same setting.
    pub thread_speedup: f64,
    /// Uniform read time over this row's read time, for matching settings.
    pub read_speedup_vs_uniform: Option<f64>,
    /// Set when epoch time went up as threads increased.
    pub non_monotone: bool,
}

pub const CSV_HEADER: &str = "sampler,tile,interval,aggregator,mini_batch,threads,epoch_time,\
read_emb,similarity,loss,gradient,update,aggregate,mean_loss,thread_speedup,\
read_speedup_vs_uniform,non_monotone";

impl BenchRow {
    fn setting(&self) -> (&str, usize, usize, bool, usize) {
        (&self.sampler, self.tile, self.interval, self.aggregator, self.mini_batch)
    }
}

/// Runs every plan combination from a fresh model and returns one row each.
pub fn run_bench(
    base: &TrainingConfig,
    plan: &BenchPlan,
    train: &InteractionSet,
    mut on_row: impl FnMut(&BenchRow),
) -> Result<Vec<BenchRow>> {
    plan.validate()?;
    let mut rows: Vec<BenchRow> = Vec::new();
    for &sampler in &plan.samplers {
        for &agg in &plan.aggregator {
            let mbs: &[usize] = if agg { &plan.mini_batches } else { &[0] };
            for &mb in mbs {
                for &threads in &plan.threads {
                    let mut cfg = base.clone();
                    cfg.sampler = sampler;
                    cfg.num_threads = threads;
                    cfg.aggregator.enabled = agg;
                    if agg {
                        cfg.aggregator.mini_batch = mb;
                    }
                    let row = run_case(&cfg, plan, train, mb)?;
                    rows.push(row);
                }
            }
        }
    }
    annotate(&mut rows);
    for r in &rows {
        on_row(r);
    }
    Ok(rows)
}

fn run_case(cfg: &TrainingConfig, plan: &BenchPlan, train: &InteractionSet, mb: usize) -> Result<BenchRow> {
    let mut model = Model::init(train.num_users(), train.num_items(), cfg)?;
    for e in 0..plan.warmup_epochs {
        train_model_epoch(&mut model, train, cfg, e)?;
    }
    let mut phases = PhaseTimes::default();
    let mut wall = 0.0;
    let mut loss = 0.0;
    for e in 0..plan.epochs {
        let r = train_model_epoch(&mut model, train, cfg, plan.warmup_epochs + e)?;
        let p = r.phases;
        phases = PhaseTimes {
            read_emb: phases.read_emb + p.read_emb,
            similarity: phases.similarity + p.similarity,
            loss: phases.loss + p.loss,
            gradient: phases.gradient + p.gradient,
            update: phases.update + p.update,
            aggregate: phases.aggregate + p.aggregate,
        };
        wall += r.wall_time;
        loss += r.mean_loss;
    }
    let inv = 1.0 / plan.epochs as f64;
    let (sampler, tile, interval) = match cfg.sampler {
        SamplerKind::Uniform => ("uniform", 0, 0),
        SamplerKind::Tiling { tile, interval } => ("tiling", tile, interval),
    };
    Ok(BenchRow {
        sampler: sampler.to_string(),
        tile,
        interval,
        aggregator: cfg.aggregator.enabled,
        mini_batch: mb,
        threads: cfg.num_threads,
        epoch_time: wall * inv,
        phases: phases.scaled(inv),
        mean_loss: loss * inv,
        thread_speedup: 1.0,
        read_speedup_vs_uniform: None,
        non_monotone: false,
    })
}

/// Fills the derived columns from the measured ones.
pub fn annotate(rows: &mut [BenchRow]) {
    for i in 0..rows.len() {
        let first = rows
            .iter()
            .find(|r| r.setting() == rows[i].setting())
            .map(|r| r.epoch_time)
            .unwrap_or(rows[i].epoch_time);
        let prev = rows[..i]
            .iter()
            .rev()
            .find(|r| r.setting() == rows[i].setting() && r.threads < rows[i].threads)
            .map(|r| r.epoch_time);
        let uniform = rows
            .iter()
            .find(|r| {
                r.sampler == "uniform"
                    && r.aggregator == rows[i].aggregator
                    && r.mini_batch == rows[i].mini_batch
                    && r.threads == rows[i].threads
            })
            .map(|r| r.phases.read_emb);
        let row = &mut rows[i];
        row.thread_speedup = first / row.epoch_time;
        row.non_monotone = prev.is_some_and(|p| row.epoch_time > p);
        row.read_speedup_vs_uniform = match (row.sampler.as_str(), uniform) {
            ("tiling", Some(u)) => Some(u / row.phases.read_emb),
            _ => None,
        };
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let p = &r.phases;
        let read = r
            .read_speedup_vs_uniform
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.sampler,
            r.tile,
            r.interval,
            r.aggregator,
            r.mini_batch,
            r.threads,
            r.epoch_time,
            p.read_emb,
            p.similarity,
            p.loss,
            p.gradient,
            p.update,
            p.aggregate,
            r.mean_loss,
            r.thread_speedup,
            read,
            r.non_monotone
        ));
    }
    out
}
