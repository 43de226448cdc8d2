//! Negative samplers and the tile-size / refresh-interval tuner.
//!
//! The uniform sampler draws item ids i.i.d. over the whole catalogue. The
//! random-tiling sampler keeps, per thread, a contiguous copy of `n1`
//! randomly chosen item rows and draws negatives from that tile only; every
//! `n2` calls the tile is resampled and recopied. Over `M` calls at most
//! `(M / n2 + 1) * n1` distinct items are ever offered as negatives, in
//! exchange for reads that hit a small, cache-resident buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::RowSource;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Share of the expected speedup attributed to negative reads.
pub const NEG_SPEEDUP_SHARE: f64 = 0.85;
/// Share of the expected speedup attributed to positive reads.
pub const POS_SPEEDUP_SHARE: f64 = 0.15;

/// `n` i.i.d. uniform item ids in `[0, num_items)`. Positives are not excluded.
pub fn sample_uniform<R: Rng>(num_items: usize, n: usize, rng: &mut R) -> Vec<u32> {
    let mut out = vec![0; n];
    fill_uniform(num_items, &mut out, rng);
    out
}

#[inline]
pub fn fill_uniform<R: Rng>(num_items: usize, out: &mut [u32], rng: &mut R) {
    let n = num_items as u32;
    for o in out {
        *o = rng.random_range(0..n);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SamplerKind {
    Uniform,
    Tiling { tile: usize, interval: usize },
}

/// Per-thread cached tile of negative candidates.
pub struct TileState {
    tile: Vec<u32>,
    tile_embeddings: Vec<f32>,
    dim: usize,
    num_items: usize,
    iter_count: usize,
    n1: usize,
    n2: usize,
    refreshes: u64,
    rng: StreamRng,
}

impl TileState {
    /// Allocates the tile and fills it from `items`.
    pub fn new<S: RowSource>(n1: usize, n2: usize, items: &S, rng: StreamRng) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(Error::invalid(format!(
                "tile size and refresh interval must be >= 1, got {n1}, {n2}"
            )));
        }
        if items.num_rows() == 0 {
            return Err(Error::invalid("cannot tile an empty item matrix"));
        }
        let dim = items.row_dim();
        let mut state = TileState {
            tile: vec![0; n1],
            tile_embeddings: vec![0.0; n1 * dim],
            dim,
            num_items: items.num_rows(),
            iter_count: 0,
            n1,
            n2,
            refreshes: 0,
            rng,
        };
        state.fill(items);
        Ok(state)
    }

    fn fill<S: RowSource>(&mut self, items: &S) {
        fill_uniform(self.num_items, &mut self.tile, &mut self.rng);
        for (slot, &id) in self.tile.iter().enumerate() {
            let row = &mut self.tile_embeddings[slot * self.dim..(slot + 1) * self.dim];
            items.copy_row(id as usize, row);
        }
    }

    /// Draws `out.len()` tile slots, then advances the refresh counter.
    pub fn sample_into<S: RowSource>(&mut self, items: &S, out: &mut [usize]) {
        for o in out.iter_mut() {
            *o = self.rng.random_range(0..self.n1);
        }
        self.advance(items);
    }

    fn advance<S: RowSource>(&mut self, items: &S) {
        self.iter_count += 1;
        if self.iter_count == self.n2 {
            self.fill(items);
            self.refreshes += 1;
            self.iter_count = 0;
        }
    }

    pub fn tile(&self) -> &[u32] {
        &self.tile
    }

    pub fn item_at(&self, slot: usize) -> u32 {
        self.tile[slot]
    }

    /// Snapshot of the item row cached in `slot`.
    #[inline]
    pub fn slot_row(&self, slot: usize) -> &[f32] {
        &self.tile_embeddings[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn iter_count(&self) -> usize {
        self.iter_count
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }
}

/// `n` negative tile slots; read embeddings through [`TileState::slot_row`].
pub fn sample_tiled<S: RowSource>(state: &mut TileState, item_matrix: &S, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    state.sample_into(item_matrix, &mut out);
    out
}

/// Inputs of the tiling tuner. Latencies are only used as ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneInputs {
    pub num_items: u64,
    pub total_iterations: u64,
    pub num_negatives: u64,
    pub num_positives: u64,
    pub positive_hit_ratio: f64,
    pub l2_bytes: u64,
    pub l3_bytes: u64,
    pub latency_mem: f64,
    pub latency_l2: f64,
    pub latency_l3: f64,
    pub expected_speedup: f64,
    pub num_threads: u64,
    pub emb_dim: u64,
}

impl TuneInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.expected_speedup > 0.0 && self.expected_speedup.is_finite()) {
            return Err(Error::invalid(format!(
                "expected speedup must be > 0, got {}",
                self.expected_speedup
            )));
        }
        let counts = [
            ("num_items", self.num_items),
            ("total_iterations", self.total_iterations),
            ("num_negatives", self.num_negatives),
            ("num_positives", self.num_positives),
            ("l2_bytes", self.l2_bytes),
            ("l3_bytes", self.l3_bytes),
            ("num_threads", self.num_threads),
            ("emb_dim", self.emb_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.latency_l2 > 0.0
            && self.latency_l2 <= self.latency_l3
            && self.latency_l3 <= self.latency_mem)
        {
            return Err(Error::invalid(
                "latencies must satisfy 0 < t_l2 <= t_l3 <= t_m",
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_hit_ratio) {
            return Err(Error::invalid("positive hit ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheTier {
    L2,
    L3,
    Memory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupEstimate {
    pub tier: CacheTier,
    /// Bytes of all threads' tiles together.
    pub tile_bytes: u64,
    pub latency_cache: f64,
    pub neg_space: f64,
    pub neg_time_random: f64,
    pub neg_time_tiling: f64,
    pub neg_speedup: f64,
    pub pos_speedup: f64,
    /// `pos_speedup / P`, reported for inspection only.
    pub alpha: f64,
    /// `neg_speedup / P`, reported for inspection only.
    pub beta: f64,
}

/// Which cache level holds every thread's tile, and its latency.
pub fn cache_tier(inputs: &TuneInputs, n1: u64) -> (CacheTier, u64, f64) {
    let tile_bytes = n1 * inputs.emb_dim * 4 * inputs.num_threads;
    if tile_bytes < inputs.l2_bytes {
        (CacheTier::L2, tile_bytes, inputs.latency_l2)
    } else if tile_bytes < inputs.l3_bytes {
        (CacheTier::L3, tile_bytes, inputs.latency_l3)
    } else {
        (CacheTier::Memory, tile_bytes, inputs.latency_mem)
    }
}

pub fn estimate_speedup(inputs: &TuneInputs, n1: u64, n2: u64) -> SpeedupEstimate {
    let (tier, tile_bytes, t_c) = cache_tier(inputs, n1);
    let m = inputs.total_iterations as f64;
    let nn = inputs.num_negatives as f64;
    let np = inputs.num_positives as f64;
    let t_m = inputs.latency_mem;
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let r = inputs.positive_hit_ratio;

    let neg_time_random = m * nn * t_m;
    let neg_time_tiling = nn * (m / n2f) * ((n2f - n1f) * t_c + n1f * t_m);
    let neg_speedup = neg_time_random / neg_time_tiling;
    let pos_speedup = (np * t_m) / (np * r * t_c + np * (1.0 - r) * t_m);
    SpeedupEstimate {
        tier,
        tile_bytes,
        latency_cache: t_c,
        neg_space: m * n1f / n2f,
        neg_time_random,
        neg_time_tiling,
        neg_speedup,
        pos_speedup,
        alpha: pos_speedup / inputs.expected_speedup,
        beta: neg_speedup / inputs.expected_speedup,
    }
}

/// Largest power-of-two tile such that all threads' tiles fill at most half of L2.
pub fn tile_size_for_l2(l2_bytes: u64, num_threads: u64, emb_dim: u64) -> u64 {
    let budget = l2_bytes / 2;
    let per_row = num_threads * emb_dim * 4;
    let mut n1 = 1u64;
    while (n1 * 2) * per_row <= budget {
        n1 *= 2;
    }
    n1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub n1: u64,
    pub n2: u64,
    /// Interval that keeps the negative sampling space at the catalogue size.
    pub n20: f64,
    /// Interval targeting the negative share of the expected speedup.
    pub n21: f64,
    pub neg_speedup: f64,
    pub pos_speedup: f64,
    pub tier: CacheTier,
    pub estimate: SpeedupEstimate,
}

pub fn tune_tiling(inputs: &TuneInputs) -> Result<TuneResult> {
    inputs.validate()?;
    let n1 = tile_size_for_l2(inputs.l2_bytes, inputs.num_threads, inputs.emb_dim);
    let n20 = inputs.total_iterations as f64 * n1 as f64 / inputs.num_items as f64;
    let n21 = n1 as f64 / (NEG_SPEEDUP_SHARE * inputs.expected_speedup);
    let n2 = (n20.min(n21).floor() as u64).max(1);
    let estimate = estimate_speedup(inputs, n1, n2);
    Ok(TuneResult {
        n1,
        n2,
        n20,
        n21,
        neg_speedup: estimate.neg_speedup,
        pos_speedup: estimate.pos_speedup,
        tier: estimate.tier,
        estimate,
    })
}
