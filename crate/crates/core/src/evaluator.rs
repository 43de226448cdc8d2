//! Recall@K and NDCG@K with all-item ranking.

use serde::{Deserialize, Serialize};

use crate::aggregator::{mix_into, pool_into, AggregatorConfig, AggregatorWeights};
use crate::dataset::{history_of, InteractionSet};
use crate::embedding::EmbeddingMatrix;
use crate::kernels::{dot, sum_squares, ForwardCache, Scalar, Similarity};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub users_evaluated: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub k: usize,
    pub similarity: Similarity,
    pub num_threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            similarity: Similarity::Cosine,
            num_threads: 1,
        }
    }
}

/// Keeps the best `k` (score, id) pairs, best first; ids must arrive ascending
/// so that equal scores favour the lower id.
struct TopK {
    k: usize,
    best: Vec<(f64, u32)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            best: Vec::with_capacity(k + 1),
        }
    }

    fn clear(&mut self) {
        self.best.clear();
    }

    #[inline]
    fn offer(&mut self, score: f64, id: u32) {
        if self.best.len() == self.k {
            match self.best.last() {
                Some(&(worst, _)) if score > worst => {}
                _ => return,
            }
        }
        let pos = self.best.partition_point(|&(s, _)| s >= score);
        self.best.insert(pos, (score, id));
        self.best.truncate(self.k);
    }
}

/// Calls `f` for every id in `[0, n)` not in the sorted `exclude` list.
#[inline]
fn for_each_candidate(n: usize, exclude: &[u32], mut f: impl FnMut(u32)) {
    let mut ex = exclude.iter().peekable();
    for id in 0..n as u32 {
        while ex.next_if(|&&e| e < id).is_some() {}
        if ex.peek() == Some(&&id) {
            continue;
        }
        f(id);
    }
}

/// The `k` items most similar to `user_vec`, skipping `exclude` (sorted),
/// ties broken toward the lower id.
pub fn topk_items<A: Scalar>(
    user_vec: &[A],
    items: &EmbeddingMatrix,
    exclude: &[u32],
    k: usize,
    similarity: Similarity,
) -> Vec<u32> {
    let ss = sum_squares(user_vec);
    let mut top = TopK::new(k.max(1));
    for_each_candidate(items.rows(), exclude, |id| {
        let c = similarity.forward(ss, user_vec, items.row(id as usize));
        top.offer(c.sim, id);
    });
    top.best.into_iter().map(|(_, id)| id).collect()
}

/// Recall and NDCG of one ranked list against the user's test items (sorted).
pub fn user_metrics(ranked: &[u32], test_items: &[u32], k: usize) -> (f64, f64) {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, id) in ranked.iter().take(k).enumerate() {
        if test_items.binary_search(id).is_ok() {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(test_items.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let recall = hits as f64 / test_items.len() as f64;
    let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
    (recall, ndcg)
}

/// Averages Recall@K and NDCG@K over users with at least one test item.
///
/// Training positives are excluded from each ranking. When `aggregator` is
/// given and enabled, users are represented by their aggregated vectors.
pub fn evaluate(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    train: &InteractionSet,
    test: &InteractionSet,
    aggregator: Option<(&AggregatorWeights, &AggregatorConfig)>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if cfg.k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if users.dim() != items.dim() {
        return Err(Error::invalid("user and item dims differ"));
    }
    let num_users = test.num_users();
    if users.rows() < num_users || users.rows() < train.num_users() {
        return Err(Error::invalid(format!(
            "user matrix has {} rows, dataset has {num_users} users",
            users.rows()
        )));
    }
    if items.rows() < test.num_items().max(train.num_items()) {
        return Err(Error::invalid(format!(
            "item matrix has {} rows, dataset has {} items",
            items.rows(),
            test.num_items().max(train.num_items())
        )));
    }
    let aggregator = aggregator.filter(|(_, c)| c.enabled);
    if let Some((w, c)) = aggregator {
        c.validate()?;
        if w.dim() != users.dim() {
            return Err(Error::invalid("aggregator dim differs from embedding dim"));
        }
    }

    let dim = users.dim();
    let item_ss: Vec<f64> = (0..items.rows()).map(|i| sum_squares(items.row(i))).collect();
    let threads = cfg.num_threads.max(1).min(num_users.max(1));
    let block = num_users.div_ceil(threads);

    let score_block = |lo: usize, hi: usize| -> Vec<Option<(f64, f64)>> {
        let mut top = TopK::new(cfg.k);
        let mut user = vec![0.0f64; dim];
        let mut h = vec![0.0f64; dim];
        let mut pooled = vec![0.0f64; dim];
        let mut hist = Vec::new();
        let mut ranked = Vec::with_capacity(cfg.k);
        (lo..hi)
            .map(|u| {
                let test_items = test.user_items(u);
                if test_items.is_empty() {
                    return None;
                }
                let exclude = if u < train.num_users() { train.user_items(u) } else { &[] };
                for (d, &s) in user.iter_mut().zip(users.row(u)) {
                    *d = s as f64;
                }
                let vec: &[f64] = match aggregator {
                    Some((w, c)) => {
                        hist.clear();
                        let ids = if u < train.num_users() {
                            history_of(train, u, c.max_history).unwrap_or(&[])
                        } else {
                            &[]
                        };
                        for &i in ids {
                            hist.extend_from_slice(items.row(i as usize));
                        }
                        pool_into(&hist, dim, &mut pooled);
                        mix_into(&user, &pooled, w, c.gamma, &mut h);
                        &h
                    }
                    None => &user,
                };
                let ss = sum_squares(vec);
                top.clear();
                for_each_candidate(items.rows(), exclude, |id| {
                    let row = items.row(id as usize);
                    let sim = match cfg.similarity {
                        Similarity::Cosine => {
                            ForwardCache::from_reductions(ss, item_ss[id as usize], dot(vec, row)).sim
                        }
                        Similarity::Dot => dot(vec, row),
                    };
                    top.offer(sim, id);
                });
                ranked.clear();
                ranked.extend(top.best.iter().map(|&(_, id)| id));
                Some(user_metrics(&ranked, test_items, cfg.k))
            })
            .collect()
    };

    let per_user: Vec<Option<(f64, f64)>> = if threads == 1 {
        score_block(0, num_users)
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = (t * block).min(num_users);
                    let hi = ((t + 1) * block).min(num_users);
                    let f = &score_block;
                    scope.spawn(move || f(lo, hi))
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluator thread panicked"))
                .collect()
        })
    };

    let mut recall = 0.0;
    let mut ndcg = 0.0;
    let mut n = 0usize;
    for (r, g) in per_user.into_iter().flatten() {
        recall += r;
        ndcg += g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(MetricsReport {
        recall_at_k: recall / n as f64,
        ndcg_at_k: ndcg / n as f64,
        k: cfg.k,
        users_evaluated: n,
    })
}
