//! User and item embedding matrices.

use std::sync::atomic::{AtomicU32, Ordering};

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Dense row-major matrix of `rows` embeddings of length `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lock-free shared view for concurrent trainer threads.
    pub fn shared(&mut self) -> SharedMatrix<'_> {
        SharedMatrix::new(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitKind {
    Normal { mean: f64, std: f64 },
    /// Xavier-uniform with `fan_in = rows`, `fan_out = dim`.
    Xavier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    #[serde(flatten)]
    pub kind: InitKind,
    pub seed: u64,
}

impl InitSpec {
    pub fn normal(mean: f64, std: f64, seed: u64) -> Self {
        InitSpec {
            kind: InitKind::Normal { mean, std },
            seed,
        }
    }

    pub fn xavier(seed: u64) -> Self {
        InitSpec {
            kind: InitKind::Xavier,
            seed,
        }
    }
}

/// Half-width of the Xavier-uniform interval for a `rows x dim` matrix.
pub fn xavier_bound(rows: usize, dim: usize) -> f64 {
    (6.0 / (rows + dim) as f64).sqrt()
}

pub fn init_matrix(rows: usize, dim: usize, spec: &InitSpec) -> Result<EmbeddingMatrix> {
    if rows == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "matrix shape must be nonzero, got {rows}x{dim}"
        )));
    }
    let mut rng = rng::stream(spec.seed, 0);
    let data: Vec<f32> = match spec.kind {
        InitKind::Normal { mean, std } => {
            if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                return Err(Error::invalid(format!(
                    "normal init needs finite mean and std > 0, got N({mean}, {std}^2)"
                )));
            }
            let normal = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
            (0..rows * dim)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect()
        }
        InitKind::Xavier => {
            let bound = f32_at_most(xavier_bound(rows, dim));
            let uniform = Uniform::new_inclusive(-bound, bound)
                .map_err(|e| Error::invalid(e.to_string()))?;
            (0..rows * dim).map(|_| uniform.sample(&mut rng)).collect()
        }
    };
    Ok(EmbeddingMatrix { rows, dim, data })
}

/// Largest f32 not above `x` (x > 0).
fn f32_at_most(x: f64) -> f32 {
    let f = x as f32;
    if f as f64 > x {
        f32::from_bits(f.to_bits() - 1)
    } else {
        f
    }
}

/// Anything rows can be copied out of.
pub trait RowSource {
    fn num_rows(&self) -> usize;
    fn row_dim(&self) -> usize;
    fn copy_row(&self, r: usize, out: &mut [f32]);
}

impl RowSource for EmbeddingMatrix {
    fn num_rows(&self) -> usize {
        self.rows
    }

    fn row_dim(&self) -> usize {
        self.dim
    }

    fn copy_row(&self, r: usize, out: &mut [f32]) {
        out.copy_from_slice(self.row(r));
    }
}

/// Hogwild view of an [`EmbeddingMatrix`].
///
/// Any number of threads may read and write any row concurrently without
/// locks. Each lane is an `AtomicU32` accessed with relaxed ordering, so a
/// concurrent read-modify-write may lose an update but never tears a lane.
/// Updates are plain load/compute/store, not atomic RMW.
#[derive(Clone, Copy)]
pub struct SharedMatrix<'a> {
    cells: &'a [AtomicU32],
    rows: usize,
    dim: usize,
}

impl<'a> SharedMatrix<'a> {
    pub fn new(m: &'a mut EmbeddingMatrix) -> Self {
        let (rows, dim) = (m.rows, m.dim);
        let data: &'a mut [f32] = &mut m.data;
        // SAFETY: f32 and AtomicU32 have identical size and alignment, and the
        // exclusive borrow guarantees no non-atomic access for 'a.
        let cells = unsafe { &*(data as *mut [f32] as *const [AtomicU32]) };
        SharedMatrix { cells, rows, dim }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn lanes(&self, r: usize) -> &'a [AtomicU32] {
        &self.cells[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn get(&self, r: usize, k: usize) -> f32 {
        f32::from_bits(self.cells[r * self.dim + k].load(Ordering::Relaxed))
    }

    #[inline]
    pub fn read_row(&self, r: usize, out: &mut [f32]) {
        for (o, c) in out.iter_mut().zip(self.lanes(r)) {
            *o = f32::from_bits(c.load(Ordering::Relaxed));
        }
    }

    #[inline]
    pub fn read_row_f64(&self, r: usize, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(self.lanes(r)) {
            *o = f32::from_bits(c.load(Ordering::Relaxed)) as f64;
        }
    }

    /// `row <- row - lr * (grad + l2 * row)`.
    #[inline]
    pub fn sgd_row(&self, r: usize, grad: &[f64], lr: f64, l2: f64) {
        for (c, &g) in self.lanes(r).iter().zip(grad) {
            let v = f32::from_bits(c.load(Ordering::Relaxed)) as f64;
            let next = v - lr * (g + l2 * v);
            c.store((next as f32).to_bits(), Ordering::Relaxed);
        }
    }

    /// `row <- row + scale * delta`, with `delta` in f64.
    #[inline]
    pub fn add_row_scaled(&self, r: usize, delta: &[f64], scale: f64) {
        for (c, &d) in self.lanes(r).iter().zip(delta) {
            let v = f32::from_bits(c.load(Ordering::Relaxed)) as f64;
            c.store(((v + scale * d) as f32).to_bits(), Ordering::Relaxed);
        }
    }
}

impl RowSource for SharedMatrix<'_> {
    fn num_rows(&self) -> usize {
        self.rows
    }

    fn row_dim(&self) -> usize {
        self.dim
    }

    fn copy_row(&self, r: usize, out: &mut [f32]) {
        self.read_row(r, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_rejected() {
        let err = init_matrix(2, 4, &InitSpec::normal(0.0, 0.0, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn zero_shape_is_rejected() {
        assert!(init_matrix(0, 4, &InitSpec::xavier(1)).is_err());
        assert!(init_matrix(4, 0, &InitSpec::xavier(1)).is_err());
    }

    #[test]
    fn normal_init_moments() {
        let m = init_matrix(1000, 64, &InitSpec::normal(0.0, 0.1, 7)).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = m
            .as_slice()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = InitSpec::normal(0.0, 0.1, 42);
        let a = init_matrix(17, 8, &spec).unwrap();
        let b = init_matrix(17, 8, &spec).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = init_matrix(17, 8, &InitSpec::normal(0.0, 0.1, 43)).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn xavier_respects_bound() {
        for &(rows, dim) in &[(1, 1), (3, 5), (500, 64), (40, 128)] {
            let m = init_matrix(rows, dim, &InitSpec::xavier(3)).unwrap();
            let bound = xavier_bound(rows, dim);
            assert!(m.as_slice().iter().all(|&v| (v as f64).abs() <= bound));
        }
    }

    #[test]
    fn shared_view_updates_in_place() {
        let mut m = EmbeddingMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        {
            let s = m.shared();
            s.sgd_row(1, &[1.0, -1.0], 0.5, 0.0);
            let mut out = [0.0f32; 2];
            s.read_row(0, &mut out);
            assert_eq!(out, [1.0, 2.0]);
        }
        assert_eq!(m.as_slice(), &[1.0, 2.0, 2.5, 4.5]);
    }

    #[test]
    fn shared_view_tolerates_concurrent_writers() {
        let mut m = EmbeddingMatrix::zeros(4, 8);
        {
            let s = m.shared();
            std::thread::scope(|scope| {
                for t in 0..4 {
                    scope.spawn(move || {
                        for _ in 0..1000 {
                            s.add_row_scaled(t % 2, &[1.0; 8], 1.0);
                        }
                    });
                }
            });
        }
        // Lost updates are allowed; values stay finite and bounded.
        assert!(m.is_finite());
        assert!(m.as_slice().iter().all(|&v| (0.0..=4000.0).contains(&v)));
        assert!(m.row(2).iter().all(|&v| v == 0.0));
    }
}
