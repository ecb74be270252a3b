use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetBundle, Split};
use crate::error::{Error, Result};

/// Seeded random partition: `round(train_fraction * n)` videos go to train.
pub fn split_videos(video_ids: &[&str], train_fraction: f64, seed: u64) -> Result<BTreeMap<String, Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    if video_ids.len() < 2 {
        return Err(Error::InvalidArgument("splitting needs at least 2 videos".into()));
    }
    let mut ids: Vec<&str> = video_ids.to_vec();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v.to_owned(), if i < n_train { Split::Train } else { Split::Test }))
        .collect())
}

pub fn split_dataset(bundle: DatasetBundle, train_fraction: f64, seed: u64) -> Result<DatasetBundle> {
    let split = split_videos(&bundle.video_ids(), train_fraction, seed)?;
    bundle.with_split(split)
}
