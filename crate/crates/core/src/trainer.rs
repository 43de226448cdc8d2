//! Fused forward/backward SGD over user-item pairs.
//!
//! Each epoch enumerates every training pair once in a seed-determined order.
//! Worker threads claim contiguous chunks of that order from a shared counter
//! and, per pair:
//!
//! 1. read the user row, the positive row, and `n` negatives (uniform or tiled);
//! 2. aggregate the user's history when the aggregation layer is on;
//! 3. compute similarities, keeping the reductions in a [`ForwardCache`];
//! 4. compute the cosine contrastive loss and its derivatives;
//! 5. form analytical gradients from the cached reductions;
//! 6. write the touched rows in place with plain SGD.
//!
//! All threads write the shared matrices without locks. Scratch state lives
//! in a per-thread buffer of size `O(n * K)`; nothing is batched.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregator::{
    backward_into, mix_into, pool_into, pooled_gradient_into, AggregatorConfig,
    AggregatorWeights, LocalGradState,
};
use crate::checkpoint::save_model;
use crate::dataset::{epoch_pairs, history_of, InteractionSet, TrainingPair};
use crate::embedding::{init_matrix, EmbeddingMatrix, InitKind, InitSpec, SharedMatrix};
use crate::evaluator::{evaluate, EvalConfig, MetricsReport};
use crate::kernels::{ccl_loss_and_grad_into, sum_squares, ForwardCache, LossParams, Similarity};
use crate::rng::{self, StreamRng};
use crate::sampler::{fill_uniform, SamplerKind, TileState};
use crate::{Error, Result};

/// Pairs claimed per counter increment.
const CHUNK: usize = 256;
const EPOCH_TAG: u64 = 0x45_50_4f_43_48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub emb_dim: usize,
    pub num_negatives: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub num_threads: usize,
    pub similarity: Similarity,
    pub loss: LossParams,
    pub sampler: SamplerKind,
    pub aggregator: AggregatorConfig,
    pub seed: u64,
    pub l2_reg: f64,
    pub init: InitKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            emb_dim: 128,
            num_negatives: 64,
            learning_rate: 0.05,
            epochs: 100,
            num_threads: 1,
            similarity: Similarity::Cosine,
            loss: LossParams::default(),
            sampler: SamplerKind::Uniform,
            aggregator: AggregatorConfig::default(),
            seed: 0,
            l2_reg: 0.0,
            init: InitKind::Normal {
                mean: 0.0,
                std: 0.01,
            },
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 {
            return Err(Error::invalid("embedding dim must be >= 1"));
        }
        if self.num_negatives == 0 {
            return Err(Error::invalid("need at least one negative per pair"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if self.num_threads == 0 {
            return Err(Error::invalid("need at least one thread"));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(Error::invalid("l2_reg must be >= 0"));
        }
        if let SamplerKind::Tiling { tile, interval } = self.sampler {
            if tile == 0 || interval == 0 {
                return Err(Error::invalid("tile size and refresh interval must be >= 1"));
            }
        }
        self.loss.validate()?;
        self.aggregator.validate()
    }

    fn aggregator_lr(&self) -> f64 {
        self.aggregator.learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Trainable state: both embedding matrices and the optional aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub users: EmbeddingMatrix,
    pub items: EmbeddingMatrix,
    pub aggregator: Option<AggregatorWeights>,
}

impl Model {
    pub fn init(num_users: usize, num_items: usize, cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = |tag| InitSpec {
            kind: cfg.init,
            seed: rng::derive_seed(cfg.seed, tag),
        };
        let users = init_matrix(num_users, cfg.emb_dim, &spec(rng::STREAM_USERS))?;
        let items = init_matrix(num_items, cfg.emb_dim, &spec(rng::STREAM_ITEMS))?;
        let aggregator = if cfg.aggregator.enabled {
            Some(AggregatorWeights::xavier(
                cfg.emb_dim,
                rng::derive_seed(cfg.seed, rng::STREAM_AGGREGATOR),
            )?)
        } else {
            None
        };
        Ok(Model {
            users,
            items,
            aggregator,
        })
    }
}

/// Seconds spent per phase, averaged over worker threads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub read_emb: f64,
    pub similarity: f64,
    pub loss: f64,
    pub gradient: f64,
    pub update: f64,
    pub aggregate: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.read_emb + self.similarity + self.loss + self.gradient + self.update + self.aggregate
    }

    fn add(&mut self, o: &PhaseTimes) {
        self.read_emb += o.read_emb;
        self.similarity += o.similarity;
        self.loss += o.loss;
        self.gradient += o.gradient;
        self.update += o.update;
        self.aggregate += o.aggregate;
    }

    pub fn scaled(&self, s: f64) -> PhaseTimes {
        PhaseTimes {
            read_emb: self.read_emb * s,
            similarity: self.similarity * s,
            loss: self.loss * s,
            gradient: self.gradient * s,
            update: self.update * s,
            aggregate: self.aggregate * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time: f64,
    pub phases: PhaseTimes,
    pub degenerate: u64,
    pub pairs: usize,
    pub weight_flushes: u64,
    pub tile_refreshes: u64,
}

struct Stopwatch(Instant);

impl Stopwatch {
    #[inline]
    fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let dt = now.duration_since(self.0).as_secs_f64();
        self.0 = now;
        dt
    }
}

#[derive(Default)]
struct WorkerStats {
    loss_sum: f64,
    pairs: usize,
    degenerate: u64,
    phases: PhaseTimes,
    weight_flushes: u64,
    tile_refreshes: u64,
}

enum Negatives {
    Uniform,
    Tiled(Box<TileState>),
}

struct Worker<'a> {
    cfg: &'a TrainingConfig,
    train: &'a InteractionSet,
    users: SharedMatrix<'a>,
    items: SharedMatrix<'a>,
    weights: Option<SharedMatrix<'a>>,
    rng: StreamRng,
    negatives: Negatives,
    local: Option<LocalGradState>,
    dim: usize,
    // scratch
    user: Vec<f64>,
    h: Vec<f64>,
    pooled: Vec<f64>,
    pooled_grad: Vec<f64>,
    history: Vec<f32>,
    pos_row: Vec<f32>,
    neg_rows: Vec<f32>,
    neg_ids: Vec<u32>,
    slots: Vec<usize>,
    caches: Vec<ForwardCache>,
    neg_sims: Vec<f64>,
    dnegs: Vec<f64>,
    h_grad: Vec<f64>,
    user_grad: Vec<f64>,
    pos_grad: Vec<f64>,
    neg_grads: Vec<f64>,
    stats: WorkerStats,
}

impl<'a> Worker<'a> {
    fn new(
        cfg: &'a TrainingConfig,
        train: &'a InteractionSet,
        users: SharedMatrix<'a>,
        items: SharedMatrix<'a>,
        weights: Option<SharedMatrix<'a>>,
        seed: u64,
        thread: usize,
    ) -> Result<Self> {
        let dim = cfg.emb_dim;
        let n = cfg.num_negatives;
        let rng = rng::stream(seed, 1 + thread as u64);
        let mut stats = WorkerStats::default();
        let mut watch = Stopwatch(Instant::now());
        let negatives = match cfg.sampler {
            SamplerKind::Uniform => Negatives::Uniform,
            SamplerKind::Tiling { tile, interval } => {
                let tile_rng = rng::stream(rng::derive_seed(seed, thread as u64), 0);
                Negatives::Tiled(Box::new(TileState::new(tile, interval, &items, tile_rng)?))
            }
        };
        stats.phases.read_emb += watch.lap();
        let local = weights
            .as_ref()
            .map(|_| LocalGradState::new(dim, cfg.aggregator.mini_batch));
        let max_hist = if weights.is_some() { cfg.aggregator.max_history } else { 0 };
        Ok(Worker {
            cfg,
            train,
            users,
            items,
            weights,
            rng,
            negatives,
            local,
            dim,
            user: vec![0.0; dim],
            h: vec![0.0; dim],
            pooled: vec![0.0; dim],
            pooled_grad: vec![0.0; dim],
            history: Vec::with_capacity(max_hist * dim),
            pos_row: vec![0.0; dim],
            neg_rows: vec![0.0; n * dim],
            neg_ids: vec![0; n],
            slots: vec![0; n],
            caches: vec![ForwardCache::default(); n + 1],
            neg_sims: vec![0.0; n],
            dnegs: vec![0.0; n],
            h_grad: vec![0.0; dim],
            user_grad: vec![0.0; dim],
            pos_grad: vec![0.0; dim],
            neg_grads: vec![0.0; n * dim],
            stats,
        })
    }

    fn step(&mut self, pair: TrainingPair, watch: &mut Stopwatch) -> Result<()> {
        let dim = self.dim;
        let n = self.cfg.num_negatives;
        let sim = self.cfg.similarity;
        let lr = self.cfg.learning_rate;
        let l2 = self.cfg.l2_reg;
        let user_id = pair.user as usize;
        let pos_id = pair.pos_item as usize;

        watch.lap();
        // read
        self.users.read_row_f64(user_id, &mut self.user);
        self.items.read_row(pos_id, &mut self.pos_row);
        match &mut self.negatives {
            Negatives::Uniform => {
                fill_uniform(self.items.rows(), &mut self.neg_ids, &mut self.rng);
                for (j, &id) in self.neg_ids.iter().enumerate() {
                    self.items
                        .read_row(id as usize, &mut self.neg_rows[j * dim..(j + 1) * dim]);
                }
            }
            Negatives::Tiled(tile) => {
                let before = tile.refreshes();
                tile.sample_into(&self.items, &mut self.slots);
                self.stats.tile_refreshes += tile.refreshes() - before;
                for (j, &slot) in self.slots.iter().enumerate() {
                    self.neg_ids[j] = tile.item_at(slot);
                    self.neg_rows[j * dim..(j + 1) * dim].copy_from_slice(tile.slot_row(slot));
                }
            }
        }
        self.stats.phases.read_emb += watch.lap();

        // aggregate forward
        if let Some(w) = &self.weights {
            let agg = &self.cfg.aggregator;
            self.history.clear();
            for &i in history_of(self.train, user_id, agg.max_history)? {
                let start = self.history.len();
                self.history.resize(start + dim, 0.0);
                self.items.read_row(i as usize, &mut self.history[start..]);
            }
            pool_into(&self.history, dim, &mut self.pooled);
            mix_into(&self.user, &self.pooled, w, agg.gamma, &mut self.h);
            self.stats.phases.aggregate += watch.lap();
        }
        let hv: &[f64] = if self.weights.is_some() { &self.h } else { &self.user };

        // similarity
        let ss = sum_squares(hv);
        self.caches[0] = sim.forward(ss, hv, &self.pos_row);
        for j in 0..n {
            let c = sim.forward(ss, hv, &self.neg_rows[j * dim..(j + 1) * dim]);
            self.neg_sims[j] = c.sim;
            self.caches[j + 1] = c;
        }
        self.stats.degenerate += self.caches.iter().filter(|c| c.degenerate).count() as u64;
        self.stats.phases.similarity += watch.lap();

        // loss
        let (loss, dpos) =
            ccl_loss_and_grad_into(self.caches[0].sim, &self.neg_sims, &self.cfg.loss, &mut self.dnegs)?;
        self.stats.loss_sum += loss;
        self.stats.phases.loss += watch.lap();

        // gradient
        self.h_grad.fill(0.0);
        self.pos_grad.fill(0.0);
        sim.accumulate_grad_user(hv, &self.pos_row, &self.caches[0], dpos, &mut self.h_grad);
        sim.accumulate_grad_item(hv, &self.pos_row, &self.caches[0], dpos, &mut self.pos_grad);
        for j in 0..n {
            let d = self.dnegs[j];
            let out = &mut self.neg_grads[j * dim..(j + 1) * dim];
            out.fill(0.0);
            if d == 0.0 {
                continue;
            }
            let row = &self.neg_rows[j * dim..(j + 1) * dim];
            sim.accumulate_grad_user(hv, row, &self.caches[j + 1], d, &mut self.h_grad);
            sim.accumulate_grad_item(hv, row, &self.caches[j + 1], d, out);
        }
        self.stats.phases.gradient += watch.lap();

        // aggregate backward
        let user_grad: &[f64] = match (&self.weights, &mut self.local) {
            (Some(w), Some(local)) => {
                let agg = &self.cfg.aggregator;
                let propagate = agg.propagate_history && !self.history.is_empty();
                if propagate {
                    pooled_gradient_into(&self.h_grad, w, agg.gamma, &mut self.pooled_grad);
                }
                let before = local.flushes();
                backward_into(
                    &self.h_grad,
                    &self.pooled,
                    w,
                    agg.gamma,
                    local,
                    self.cfg.aggregator_lr(),
                    &mut self.user_grad,
                );
                self.stats.weight_flushes += local.flushes() - before;
                if propagate {
                    let hist_len = self.history.len() / dim;
                    let scale = -lr / hist_len as f64;
                    for &i in history_of(self.train, user_id, agg.max_history)? {
                        self.items.add_row_scaled(i as usize, &self.pooled_grad, scale);
                    }
                }
                self.stats.phases.aggregate += watch.lap();
                &self.user_grad
            }
            _ => &self.h_grad,
        };

        // update
        self.items.sgd_row(pos_id, &self.pos_grad, lr, l2);
        for j in 0..n {
            if self.dnegs[j] != 0.0 || l2 != 0.0 {
                self.items.sgd_row(
                    self.neg_ids[j] as usize,
                    &self.neg_grads[j * dim..(j + 1) * dim],
                    lr,
                    l2,
                );
            }
        }
        self.users.sgd_row(user_id, user_grad, lr, l2);
        self.stats.phases.update += watch.lap();
        self.stats.pairs += 1;
        Ok(())
    }

    fn run(mut self, pairs: &[TrainingPair], next: &AtomicUsize) -> Result<WorkerStats> {
        let mut watch = Stopwatch(Instant::now());
        loop {
            let start = next.fetch_add(CHUNK, Ordering::Relaxed);
            if start >= pairs.len() {
                break;
            }
            let end = (start + CHUNK).min(pairs.len());
            for &p in &pairs[start..end] {
                self.step(p, &mut watch)?;
            }
        }
        Ok(self.stats)
    }
}

fn check_shapes(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    weights: Option<&AggregatorWeights>,
    train: &InteractionSet,
    cfg: &TrainingConfig,
) -> Result<()> {
    cfg.validate()?;
    let k = cfg.emb_dim;
    if users.dim() != k || items.dim() != k {
        return Err(Error::invalid(format!(
            "embedding dims ({}, {}) differ from configured K = {k}",
            users.dim(),
            items.dim()
        )));
    }
    if users.rows() < train.num_users() {
        return Err(Error::invalid(format!(
            "user matrix has {} rows but the dataset has {} users",
            users.rows(),
            train.num_users()
        )));
    }
    if items.rows() < train.num_items() || items.rows() == 0 {
        return Err(Error::invalid(format!(
            "item matrix has {} rows but the dataset has {} items",
            items.rows(),
            train.num_items()
        )));
    }
    if cfg.aggregator.enabled {
        match weights {
            Some(w) if w.dim() == k => {}
            Some(w) => {
                return Err(Error::invalid(format!(
                    "aggregator is {0}x{0}, expected {k}x{k}",
                    w.dim()
                )))
            }
            None => return Err(Error::invalid("aggregator enabled but no weights given")),
        }
    }
    Ok(())
}

/// Runs one epoch over every pair in `train`. `epoch` is the 0-based index
/// that seeds this epoch's pair order and sampler streams.
pub fn train_epoch(
    users: &mut EmbeddingMatrix,
    items: &mut EmbeddingMatrix,
    weights: Option<&mut AggregatorWeights>,
    train: &InteractionSet,
    cfg: &TrainingConfig,
    epoch: usize,
) -> Result<EpochReport> {
    check_shapes(users, items, weights.as_deref(), train, cfg)?;
    let started = Instant::now();
    let epoch_seed = rng::derive_seed(cfg.seed, EPOCH_TAG.wrapping_add(epoch as u64));
    let pairs = epoch_pairs(train, epoch_seed);
    let next = AtomicUsize::new(0);

    let users = users.shared();
    let items = items.shared();
    let weights = if cfg.aggregator.enabled {
        weights.map(|w| w.shared())
    } else {
        None
    };

    let threads = cfg.num_threads.min(pairs.len().div_ceil(CHUNK)).max(1);
    let partials: Vec<WorkerStats> = if threads == 1 {
        vec![Worker::new(cfg, train, users, items, weights, epoch_seed, 0)?.run(&pairs, &next)?]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let (pairs, next) = (&pairs, &next);
                    scope.spawn(move || {
                        Worker::new(cfg, train, users, items, weights, epoch_seed, t)?
                            .run(pairs, next)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trainer thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };

    let wall_time = started.elapsed().as_secs_f64();
    let mut phases = PhaseTimes::default();
    let mut report = EpochReport {
        epoch: epoch + 1,
        mean_loss: 0.0,
        wall_time,
        phases,
        degenerate: 0,
        pairs: 0,
        weight_flushes: 0,
        tile_refreshes: 0,
    };
    let mut loss_sum = 0.0;
    for p in &partials {
        phases.add(&p.phases);
        loss_sum += p.loss_sum;
        report.pairs += p.pairs;
        report.degenerate += p.degenerate;
        report.weight_flushes += p.weight_flushes;
        report.tile_refreshes += p.tile_refreshes;
    }
    report.phases = phases.scaled(1.0 / partials.len() as f64);
    report.mean_loss = if report.pairs > 0 {
        loss_sum / report.pairs as f64
    } else {
        0.0
    };
    Ok(report)
}

/// Runs one epoch on a [`Model`].
pub fn train_model_epoch(
    model: &mut Model,
    train: &InteractionSet,
    cfg: &TrainingConfig,
    epoch: usize,
) -> Result<EpochReport> {
    let Model {
        users,
        items,
        aggregator,
    } = model;
    train_epoch(users, items, aggregator.as_mut(), train, cfg, epoch)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Evaluate after every `eval_interval` epochs; 0 disables in-run evaluation.
    pub eval_interval: usize,
    pub eval: EvalConfig,
    /// Epochs already completed (when resuming from a checkpoint).
    pub start_epoch: usize,
    /// Where `model.ckpt` (final) and `best.ckpt` (best recall) go.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    InRun,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Epochs completed when evaluated.
    pub epoch: usize,
    pub kind: EvalKind,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochReport>,
    pub evaluations: Vec<EvalRecord>,
    pub final_metrics: MetricsReport,
    pub best: EvalRecord,
}

pub enum TrainEvent<'a> {
    Epoch(&'a EpochReport),
    Eval(&'a EvalRecord),
}

/// Trains `model` from `opts.start_epoch` to `cfg.epochs`, evaluating on
/// `test` every `opts.eval_interval` epochs and once at the end.
pub fn train(
    model: &mut Model,
    train: &InteractionSet,
    test: &InteractionSet,
    cfg: &TrainingConfig,
    opts: &TrainOptions,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    check_shapes(&model.users, &model.items, model.aggregator.as_ref(), train, cfg)?;
    let eval = |model: &Model| {
        evaluate(
            &model.users,
            &model.items,
            train,
            test,
            model.aggregator.as_ref().map(|w| (w, &cfg.aggregator)),
            &opts.eval,
        )
    };
    let save = |model: &Model, name: &str| -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            save_model(model, dir.join(name))?;
        }
        Ok(())
    };

    let mut epochs = Vec::new();
    let mut evaluations: Vec<EvalRecord> = Vec::new();
    let mut best: Option<EvalRecord> = None;
    let mut last_eval_epoch = None;
    for e in opts.start_epoch..cfg.epochs {
        let report = train_model_epoch(model, train, cfg, e)?;
        on_event(TrainEvent::Epoch(&report));
        epochs.push(report);
        let done = e + 1;
        if opts.eval_interval > 0 && done % opts.eval_interval == 0 {
            let rec = EvalRecord {
                epoch: done,
                kind: EvalKind::InRun,
                metrics: eval(model)?,
            };
            on_event(TrainEvent::Eval(&rec));
            if best
                .as_ref()
                .is_none_or(|b| rec.metrics.recall_at_k > b.metrics.recall_at_k)
            {
                save(model, "best.ckpt")?;
                best = Some(rec.clone());
            }
            last_eval_epoch = Some((done, rec.metrics));
            evaluations.push(rec);
        }
    }

    let done = cfg.epochs.max(opts.start_epoch);
    let final_metrics = match last_eval_epoch {
        Some((epoch, m)) if epoch == done => m,
        _ => eval(model)?,
    };
    let final_rec = EvalRecord {
        epoch: done,
        kind: EvalKind::Final,
        metrics: final_metrics,
    };
    on_event(TrainEvent::Eval(&final_rec));
    if best
        .as_ref()
        .is_none_or(|b| final_metrics.recall_at_k > b.metrics.recall_at_k)
    {
        save(model, "best.ckpt")?;
        best = Some(final_rec.clone());
    }
    evaluations.push(final_rec);
    save(model, "model.ckpt")?;
    Ok(TrainOutcome {
        epochs,
        evaluations,
        final_metrics,
        best: best.expect("final evaluation always recorded"),
    })
}
