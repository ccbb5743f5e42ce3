//! Batch construction and negative mining.
//!
//! Queries and labels are addressed by their position in the [`Dataset`]
//! (labels are stored in ascending id order, so position order is id order
//! and every "lowest id wins" tie-break is a lowest-position tie-break).

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::TextRecord;
use crate::losses::{TARGET_NEGATIVE, TARGET_POSITIVE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MiningError {
    #[error("need at least {batch_size} queries to form a batch, got {queries}")]
    TooFewQueries { queries: usize, batch_size: usize },
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
}

/// Queries with their positive label sets, plus the label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labels: Vec<TextRecord>,
    pub queries: Vec<TextRecord>,
    /// Sorted label positions of each query's positive set.
    pub positives: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn is_positive(&self, query: usize, label: usize) -> bool {
        self.positives[query].binary_search(&label).is_ok()
    }
}

/// Orders by similarity descending, then position ascending.
fn harder_first(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy balanced clustering of queries into batches of semantically
/// related queries.
///
/// A random unassigned query seeds each batch, which is filled with its
/// `batch_size − 1` most cosine-similar unassigned queries. The final batch
/// takes whatever is left; a single leftover query joins the previous
/// batch instead, so every query lands in exactly one batch.
pub fn cluster_batches(
    query_embeddings: &[Vec<f64>],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, MiningError> {
    if batch_size < 2 {
        return Err(MiningError::BatchTooSmall(batch_size));
    }
    let n = query_embeddings.len();
    if n < batch_size {
        return Err(MiningError::TooFewQueries {
            queries: n,
            batch_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut assigned = vec![false; n];
    let mut batches: Vec<Vec<usize>> = Vec::new();

    for &seed_query in &order {
        if assigned[seed_query] {
            continue;
        }
        assigned[seed_query] = true;
        let mut candidates: Vec<(usize, f64)> = (0..n)
            .filter(|&j| !assigned[j])
            .map(|j| {
                (
                    j,
                    cosine(&query_embeddings[seed_query], &query_embeddings[j]),
                )
            })
            .collect();
        candidates.sort_by(harder_first);
        let mut batch = vec![seed_query];
        for &(j, _) in candidates.iter().take(batch_size - 1) {
            assigned[j] = true;
            batch.push(j);
        }
        batches.push(batch);
    }
    if let Some(last) = batches.last() {
        if last.len() == 1 && batches.len() > 1 {
            let single = batches.pop().expect("non-empty");
            batches.last_mut().expect("previous batch").extend(single);
        }
    }
    Ok(batches)
}

/// Uniformly shuffled batches, used with the ANCE sampler.
pub fn random_batches<R: Rng>(
    num_queries: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, MiningError> {
    if batch_size < 2 {
        return Err(MiningError::BatchTooSmall(batch_size));
    }
    if num_queries < batch_size {
        return Err(MiningError::TooFewQueries {
            queries: num_queries,
            batch_size,
        });
    }
    let mut order: Vec<usize> = (0..num_queries).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let single = batches.pop().expect("non-empty");
        batches.last_mut().expect("previous batch").extend(single);
    }
    Ok(batches)
}

/// One positive per query, uniform over its positive set.
pub fn sample_positives<R: Rng>(dataset: &Dataset, query_ids: &[usize], rng: &mut R) -> Vec<usize> {
    query_ids
        .iter()
        .map(|&q| {
            let set = &dataset.positives[q];
            set[rng.random_range(0..set.len())]
        })
        .collect()
}

/// Negatives of each query from the other queries' sampled positives,
/// dropping anything in the query's own positive set. Lists are sorted and
/// duplicate-free; a list may be empty.
pub fn in_batch_negatives(pos_label_ids: &[usize], positive_sets: &[&[usize]]) -> Vec<Vec<usize>> {
    assert_eq!(pos_label_ids.len(), positive_sets.len());
    (0..pos_label_ids.len())
        .map(|i| {
            let set: BTreeSet<usize> = pos_label_ids
                .iter()
                .enumerate()
                .filter(|&(j, l)| j != i && positive_sets[i].binary_search(l).is_err())
                .map(|(_, &l)| l)
                .collect();
            set.into_iter().collect()
        })
        .collect()
}

/// A training batch: queries, one sampled positive each, and per-query
/// candidate negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub query_ids: Vec<usize>,
    pub pos_label_ids: Vec<usize>,
    pub neg_pools: Vec<Vec<usize>>,
}

impl Batch {
    /// Assembles a batch with in-batch negatives. `shared_negatives`
    /// (e.g. ANCE samples) are offered to every query of the batch, again
    /// minus each query's positives.
    pub fn assemble(
        dataset: &Dataset,
        query_ids: Vec<usize>,
        pos_label_ids: Vec<usize>,
        shared_negatives: &[usize],
    ) -> Self {
        let sets: Vec<&[usize]> = query_ids
            .iter()
            .map(|&q| dataset.positives[q].as_slice())
            .collect();
        let mut neg_pools = in_batch_negatives(&pos_label_ids, &sets);
        if !shared_negatives.is_empty() {
            for (pool, set) in neg_pools.iter_mut().zip(&sets) {
                let mut merged: BTreeSet<usize> = pool.iter().copied().collect();
                merged.extend(
                    shared_negatives
                        .iter()
                        .filter(|l| set.binary_search(l).is_err()),
                );
                *pool = merged.into_iter().collect();
            }
        }
        Self {
            query_ids,
            pos_label_ids,
            neg_pools,
        }
    }

    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }

    /// Every label touched by the batch, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        let mut set: BTreeSet<usize> = self.pos_label_ids.iter().copied().collect();
        for pool in &self.neg_pools {
            set.extend(pool.iter().copied());
        }
        set.into_iter().collect()
    }
}

/// For every query, the `pool_size` non-positive labels most similar to
/// it, hardest first. Exact brute-force search.
pub fn ance_pool(
    query_embeddings: &[Vec<f64>],
    label_embeddings: &[Vec<f64>],
    positives: &[Vec<usize>],
    pool_size: usize,
) -> Vec<Vec<usize>> {
    assert!(pool_size >= 1, "pool size must be positive");
    query_embeddings
        .iter()
        .zip(positives)
        .map(|(q, pos)| {
            let mut scored: Vec<(usize, f64)> = label_embeddings
                .iter()
                .enumerate()
                .filter(|(l, _)| pos.binary_search(l).is_err())
                .map(|(l, e)| (l, q.iter().zip(e).map(|(a, b)| a * b).sum()))
                .collect();
            scored.sort_by(harder_first);
            scored.into_iter().take(pool_size).map(|(l, _)| l).collect()
        })
        .collect()
}

/// One uniformly drawn member of each pool.
pub fn sample_from_pools<R: Rng>(pools: &[&[usize]], rng: &mut R) -> Vec<usize> {
    pools
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| p[rng.random_range(0..p.len())])
        .collect()
}

/// A query's positive pair followed by its hardest negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocking {
    pub query: usize,
    pub labels: Vec<usize>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockingSet {
    /// One blocking per batch query, in batch order.
    pub blockings: Vec<Blocking>,
    /// How many blockings got fewer than `k − 1` negatives.
    pub shrunk: usize,
}

/// Builds each query's blocking from its sampled positive and the `k − 1`
/// candidates in `negatives` with the highest `similarity(slot, label)`,
/// ties to the lower label. Queries short of negatives get a smaller
/// blocking and are counted in [`BlockingSet::shrunk`].
pub fn build_blockings(
    batch: &Batch,
    negatives: &[Vec<usize>],
    similarity: impl Fn(usize, usize) -> f64,
    k: usize,
) -> BlockingSet {
    assert!(k >= 2, "blocking size must be at least 2");
    assert_eq!(negatives.len(), batch.len());
    let mut set = BlockingSet::default();
    for (slot, negs) in negatives.iter().enumerate() {
        let mut scored: Vec<(usize, f64)> =
            negs.iter().map(|&l| (l, similarity(slot, l))).collect();
        scored.sort_by(harder_first);
        if scored.len() < k - 1 {
            set.shrunk += 1;
            log::debug!(
                "query {} has {} negatives for a blocking of {k}",
                batch.query_ids[slot],
                scored.len()
            );
        }
        let mut labels = vec![batch.pos_label_ids[slot]];
        let mut targets = vec![TARGET_POSITIVE];
        for (l, _) in scored.into_iter().take(k - 1) {
            labels.push(l);
            targets.push(TARGET_NEGATIVE);
        }
        set.blockings.push(Blocking {
            query: batch.query_ids[slot],
            labels,
            targets,
        });
    }
    set
}
