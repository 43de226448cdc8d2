//! Shared-memory training for matrix-factorization collaborative filtering
//! with cosine contrastive loss.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`embedding`]: user/item embedding matrices, initialisation, and the
//!   lock-free [`embedding::SharedMatrix`] view trainer threads write through.
//! - [`checkpoint`]: the binary matrix format and the model container.
//! - [`dataset`]: implicit-feedback interaction sets and epoch enumeration.
//! - [`sampler`]: uniform and cache-aware random-tiling negative samplers, and
//!   the tile-size / refresh-interval tuner.
//! - [`kernels`]: similarity, loss and analytical gradients with forward-value reuse.
//! - [`aggregator`]: the behavior-aggregation layer with local gradient accumulation.
//! - [`trainer`]: the fused multithreaded SGD loop.
//! - [`evaluator`]: Recall@K / NDCG@K over all items.
//! - [`bench`]: per-phase timing sweeps.

pub mod aggregator;
pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod embedding;
mod error;
pub mod evaluator;
pub mod kernels;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
