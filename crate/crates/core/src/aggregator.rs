//! Behavior-aggregation layer.
//!
//! The aggregated user vector mixes the user's own embedding with the
//! average-pooled embeddings of the user's historical items, projected by a
//! shared `K x K` weight matrix `W`:
//!
//! ```text
//! pooled = mean(history rows)
//! h[j]   = gamma * user[j] + (1 - gamma) * sum_k pooled[k] * W[k][j]
//! ```
//!
//! Every trainer thread reads and writes the same `W` without locks. Each
//! thread accumulates its weight gradients in a private [`LocalGradState`]
//! and applies one averaged update every `mini_batch` backward calls.

use serde::{Deserialize, Serialize};

use crate::embedding::{init_matrix, EmbeddingMatrix, InitSpec, SharedMatrix};
use crate::{Error, Result};

/// Shared `K x K` aggregation weights; row `k` maps pooled input `k` to all outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorWeights {
    m: EmbeddingMatrix,
}

impl AggregatorWeights {
    pub fn xavier(dim: usize, seed: u64) -> Result<Self> {
        Ok(AggregatorWeights {
            m: init_matrix(dim, dim, &InitSpec::xavier(seed))?,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = EmbeddingMatrix::zeros(dim, dim);
        for k in 0..dim {
            m.row_mut(k)[k] = 1.0;
        }
        AggregatorWeights { m }
    }

    pub fn from_matrix(m: EmbeddingMatrix) -> Result<Self> {
        if m.rows() != m.dim() {
            return Err(Error::invalid(format!(
                "aggregator weights must be square, got {}x{}",
                m.rows(),
                m.dim()
            )));
        }
        Ok(AggregatorWeights { m })
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.m
    }

    pub fn shared(&mut self) -> SharedMatrix<'_> {
        self.m.shared()
    }
}

/// Read access to `W[k][j]`.
pub trait WeightRead {
    fn weight_dim(&self) -> usize;
    fn weight(&self, k: usize, j: usize) -> f32;
}

impl WeightRead for AggregatorWeights {
    fn weight_dim(&self) -> usize {
        self.m.dim()
    }

    #[inline]
    fn weight(&self, k: usize, j: usize) -> f32 {
        self.m.as_slice()[k * self.m.dim() + j]
    }
}

impl WeightRead for SharedMatrix<'_> {
    fn weight_dim(&self) -> usize {
        self.dim()
    }

    #[inline]
    fn weight(&self, k: usize, j: usize) -> f32 {
        self.get(k, j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub enabled: bool,
    /// Weight of the user's own embedding in the mix.
    pub gamma: f64,
    pub max_history: usize,
    /// Backward calls per shared-weight update.
    pub mini_batch: usize,
    /// Also push gradients into the history item rows.
    pub propagate_history: bool,
    /// Overrides the embedding learning rate for `W` when set.
    pub learning_rate: Option<f64>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            enabled: false,
            gamma: 0.5,
            max_history: 100,
            mini_batch: 32,
            propagate_history: false,
            learning_rate: None,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.mini_batch == 0 {
            return Err(Error::invalid("aggregator mini-batch size must be >= 1"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("aggregator learning rate must be > 0"));
            }
        }
        Ok(())
    }
}

/// Per-thread accumulated weight gradient.
pub struct LocalGradState {
    accu: Vec<f64>,
    count: usize,
    mini_batch: usize,
    flushes: u64,
}

impl LocalGradState {
    pub fn new(dim: usize, mini_batch: usize) -> Self {
        LocalGradState {
            accu: vec![0.0; dim * dim],
            count: 0,
            mini_batch: mini_batch.max(1),
            flushes: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Shared-weight updates applied so far.
    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accu
    }
}

/// Mean of the `rows` consecutive `dim`-length rows in `history`; zero if empty.
#[inline]
pub fn pool_into(history: &[f32], dim: usize, pooled: &mut [f64]) {
    pooled.fill(0.0);
    let n = history.len() / dim;
    if n == 0 {
        return;
    }
    for row in history.chunks_exact(dim) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p += v as f64;
        }
    }
    let inv = 1.0 / n as f64;
    for p in pooled.iter_mut() {
        *p *= inv;
    }
}

/// `h = gamma * user + (1 - gamma) * pooled^T W`.
#[inline]
pub fn mix_into<W: WeightRead>(user: &[f64], pooled: &[f64], w: &W, gamma: f64, h: &mut [f64]) {
    let dim = user.len();
    h.fill(0.0);
    for (k, &p) in pooled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (j, o) in h.iter_mut().enumerate() {
            *o += p * w.weight(k, j) as f64;
        }
    }
    let mix = 1.0 - gamma;
    for j in 0..dim {
        h[j] = gamma * user[j] + mix * h[j];
    }
}

/// Aggregated user vector and the pooled history, for a user and its history rows.
pub fn aggregate_forward<W: WeightRead>(
    user_vec: &[f32],
    history_vecs: &[&[f32]],
    w: &W,
    cfg: &AggregatorConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = user_vec.len();
    if w.weight_dim() != dim {
        return Err(Error::invalid(format!(
            "weights are {0}x{0} but user vector has length {dim}",
            w.weight_dim()
        )));
    }
    if history_vecs.len() > cfg.max_history {
        return Err(Error::invalid(format!(
            "history has {} items, max is {}",
            history_vecs.len(),
            cfg.max_history
        )));
    }
    if let Some(bad) = history_vecs.iter().find(|v| v.len() != dim) {
        return Err(Error::invalid(format!(
            "history vector of length {} != {dim}",
            bad.len()
        )));
    }
    let user: Vec<f64> = user_vec.iter().map(|&v| v as f64).collect();
    if !cfg.enabled {
        return Ok((user, vec![0.0; dim]));
    }
    let flat: Vec<f32> = history_vecs.iter().flat_map(|v| v.iter().copied()).collect();
    let mut pooled = vec![0.0; dim];
    pool_into(&flat, dim, &mut pooled);
    let mut h = vec![0.0; dim];
    mix_into(&user, &pooled, w, cfg.gamma, &mut h);
    Ok((h, pooled))
}

/// `(1 - gamma) * outer(pooled, h_grad)`, row-major.
pub fn weight_gradient(pooled: &[f64], h_grad: &[f64], gamma: f64) -> Vec<f64> {
    let mix = 1.0 - gamma;
    pooled
        .iter()
        .flat_map(|&p| h_grad.iter().map(move |&g| mix * p * g))
        .collect()
}

/// Gradient with respect to `pooled`: `(1 - gamma) * W h_grad`.
pub fn pooled_gradient_into<W: WeightRead>(h_grad: &[f64], w: &W, gamma: f64, out: &mut [f64]) {
    let mix = 1.0 - gamma;
    for (k, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (j, &g) in h_grad.iter().enumerate() {
            s += w.weight(k, j) as f64 * g;
        }
        *o = mix * s;
    }
}

/// Accumulates the weight gradient and, every `mini_batch` calls, applies
/// `W <- W - lr * accu / mini_batch` to the shared weights. Returns the
/// gradient with respect to the raw user embedding.
pub fn aggregate_backward(
    h_grad: &[f64],
    pooled: &[f64],
    w: &SharedMatrix<'_>,
    cfg: &AggregatorConfig,
    local: &mut LocalGradState,
    learning_rate: f64,
) -> Vec<f64> {
    let mut user_grad = vec![0.0; h_grad.len()];
    backward_into(h_grad, pooled, w, cfg.gamma, local, learning_rate, &mut user_grad);
    user_grad
}

#[inline]
pub(crate) fn backward_into(
    h_grad: &[f64],
    pooled: &[f64],
    w: &SharedMatrix<'_>,
    gamma: f64,
    local: &mut LocalGradState,
    learning_rate: f64,
    user_grad: &mut [f64],
) {
    let dim = h_grad.len();
    for (u, &g) in user_grad.iter_mut().zip(h_grad) {
        *u = gamma * g;
    }
    let mix = 1.0 - gamma;
    for (k, &p) in pooled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = &mut local.accu[k * dim..(k + 1) * dim];
        let scale = mix * p;
        for (a, &g) in row.iter_mut().zip(h_grad) {
            *a += scale * g;
        }
    }
    local.count += 1;
    if local.count == local.mini_batch {
        let inv = 1.0 / local.mini_batch as f64;
        for (k, row) in local.accu.chunks_exact_mut(dim).enumerate() {
            for g in row.iter_mut() {
                *g *= inv;
            }
            w.sgd_row(k, row, learning_rate, 0.0);
            row.fill(0.0);
        }
        local.count = 0;
        local.flushes += 1;
    }
}
