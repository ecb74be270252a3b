//! Cluster-stratified batch sampling.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Splits `0..clusters.len()` into batches for one epoch.
///
/// Each cluster is shuffled and spread evenly through the epoch order; a batch
/// that would hold a single cluster swaps its last sample for the next sample of
/// another cluster still in the pool. Batch sizes differ by at most one.
/// Deterministic in `(seed, epoch)`.
pub fn make_balanced_batches(clusters: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 4 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} is below 4")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in clusters.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::TooFewClusters(groups.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(clusters.len());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let m = members.len() as f64;
        for (j, &idx) in members.iter().enumerate() {
            keyed.push(((j as f64 + rng.random::<f64>()) / m, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut pool: VecDeque<usize> = keyed.into_iter().map(|(_, i)| i).collect();

    let n = clusters.len();
    let n_batches = n.div_ceil(batch_size);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let size = n / n_batches + usize::from(b < n % n_batches);
        let mut batch: Vec<usize> = pool.drain(..size).collect();
        let first = clusters[batch[0]];
        if batch.iter().all(|&i| clusters[i] == first) {
            if let Some(pos) = pool.iter().position(|&i| clusters[i] != first) {
                let last = batch.len() - 1;
                std::mem::swap(&mut batch[last], &mut pool[pos]);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}
