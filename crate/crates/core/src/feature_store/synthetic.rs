//! Synthetic features with a known linear quality signal.
//!
//! Video `i` gets a latent quality `q ~ U[1, 5]` which becomes its MOS. Model
//! `n` stores `signal_strength[n] * q * u_n + noise_sigma * N(0, I)` for every
//! view, where `u_n` is a fixed unit direction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_feature_file, write_labels, DatasetBundle, FeatureTable, Manifest, ManifestModel, MosLabels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_videos: usize,
    /// Feature dimension per model; its length is the model count.
    pub dims: Vec<usize>,
    pub views: usize,
    pub signal_strength: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Seed for the per-model directions `u_n`. Two datasets sharing it share
    /// their signal directions. Defaults to `seed`.
    pub direction_seed: Option<u64>,
    /// Fraction of videos whose features encode the mirrored quality `6 - q`
    /// while their MOS stays `q`.
    pub outlier_fraction: f64,
}

impl SyntheticSpec {
    /// `n_models` models of equal dim; model 0 carries signal 1.0, the rest are noise.
    pub fn new(n_videos: usize, n_models: usize, dim: usize, seed: u64) -> Self {
        let mut signal_strength = vec![0.0; n_models];
        if let Some(s) = signal_strength.first_mut() {
            *s = 1.0;
        }
        Self {
            name: "synthetic".into(),
            n_videos,
            dims: vec![dim; n_models],
            views: 1,
            signal_strength,
            noise_sigma: 0.05,
            seed,
            direction_seed: None,
            outlier_fraction: 0.0,
        }
    }

    pub fn n_models(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.n_videos < 2 {
            return bad("need at least 2 videos");
        }
        if self.dims.is_empty() {
            return bad("need at least one model");
        }
        if self.dims.contains(&0) {
            return bad("dims must be positive");
        }
        if self.views == 0 || self.views > u32::MAX as usize {
            return bad("views must be positive");
        }
        if self.signal_strength.len() != self.dims.len() {
            return bad("signal_strength needs one value per model");
        }
        if self.signal_strength.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("signal_strength must be finite and >= 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

fn model_id(n: usize) -> String {
    format!("model{n}")
}

fn video_id(i: usize) -> String {
    format!("v{i:05}")
}

/// The unit direction `u_n` of every model.
pub fn synthetic_directions(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.direction_seed.unwrap_or(spec.seed));
    rng.set_stream(1);
    spec.dims
        .iter()
        .map(|&d| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let directions = synthetic_directions(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let qualities: Vec<f64> = (0..spec.n_videos).map(|_| rng.random_range(1.0..=5.0)).collect();
    let n_outliers = (spec.outlier_fraction * spec.n_videos as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_videos).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut outlier = vec![false; spec.n_videos];
    for &i in &order[..n_outliers] {
        outlier[i] = true;
    }

    let mut tables: Vec<FeatureTable> = spec
        .dims
        .iter()
        .enumerate()
        .map(|(n, &d)| FeatureTable::new(model_id(n), d))
        .collect::<Result<_>>()?;
    let mut labels = BTreeMap::new();
    for (i, &q) in qualities.iter().enumerate() {
        let vid = video_id(i);
        labels.insert(vid.clone(), q);
        let q_feat = if outlier[i] { 6.0 - q } else { q };
        for (n, table) in tables.iter_mut().enumerate() {
            let s = spec.signal_strength[n];
            for view in 0..spec.views as u32 {
                let x: Vec<f32> = directions[n]
                    .iter()
                    .map(|&u| {
                        let eps: f64 = rng.sample(StandardNormal);
                        (s * q_feat * u + spec.noise_sigma * eps) as f32
                    })
                    .collect();
                table.insert(vid.clone(), view, x)?;
            }
        }
    }
    DatasetBundle::new(spec.name.clone(), tables, MosLabels::new(labels)?)
}

/// Writes `labels.csv`, one `<model_id>.ptmf` per table and `manifest.json`
/// into `dir`; returns the manifest path.
pub fn write_synthetic(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut models = Vec::new();
    for t in bundle.tables() {
        let file = format!("{}.ptmf", t.model_id());
        write_feature_file(t, dir.join(&file))?;
        models.push(ManifestModel {
            model_id: t.model_id().to_owned(),
            path: file.into(),
            dbi: bundle.cached_dbi().get(t.model_id()).copied(),
        });
    }
    write_labels(bundle.labels(), dir.join("labels.csv"))?;
    let manifest = Manifest {
        name: bundle.name().to_owned(),
        models,
        labels: "labels.csv".into(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
