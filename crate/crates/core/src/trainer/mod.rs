//! Training loop: stratified batches, forward, ICID objective, backward and
//! AdamW under a warmup + cosine schedule.

mod optim;
mod sampler;
mod schedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, OptimState};
pub use sampler::make_balanced_batches;
pub use schedule::lr_at;

use crate::checkpoint::Checkpoint;
use crate::dbi::{assign_clusters, dbi_report, model_weights, ClusterSpec, Selection};
use crate::error::{Error, Result};
use crate::evaluator::{plcc, predict_videos, srcc, ViewAveraging};
use crate::feature_store::{DatasetBundle, SplitFilter};
use crate::losses::{sample_triplets, total_loss_with_grads, BatchOutputs, InterMode, LossBreakdown, LossConfig, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::model::{init_heads, HeadParams, Prediction, DEFAULT_HIDDEN, DEFAULT_OUT};
use crate::par::{self, Exec};
use crate::samples::{ordered_tables, training_samples, view_samples, Sample};

pub const DEFAULT_EPOCHS: usize = 60;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.02;
pub const DEFAULT_WARMUP_EPOCHS: usize = 2;
pub const DEFAULT_K: usize = 6;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Samples per gradient accumulation chunk. Fixed so the reduction order, and
/// therefore the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `ω_n = 1 / ψ_n`.
    #[default]
    Dbi,
    /// `ω_n = 1 / N`.
    Uniform,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dbi" => Ok(WeightMode::Dbi),
            "uniform" => Ok(WeightMode::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown weight mode {other:?}; expected dbi or uniform"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// Parameters after the final iteration.
    #[default]
    Last,
    /// Parameters of the epoch with the best test SRCC.
    BestSrcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Transformed feature width D.
    pub dim: usize,
    pub hidden_dim: usize,
    /// Cluster preset (2, 4 or 6) used when `intervals` is absent.
    pub k: usize,
    pub intervals: Option<ClusterSpec>,
    pub seed: u64,
    pub train_fraction: f64,
    pub weights: WeightMode,
    pub intra: bool,
    pub inter: InterMode,
    pub checkpoint: CheckpointPolicy,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            dim: DEFAULT_OUT,
            hidden_dim: DEFAULT_HIDDEN,
            k: DEFAULT_K,
            intervals: None,
            seed: 0,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            weights: WeightMode::Dbi,
            intra: true,
            inter: InterMode::Centroid,
            checkpoint: CheckpointPolicy::Last,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size < 4 {
            return bad(format!("batch_size {} is below 4", self.batch_size));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) || !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0".into());
        }
        if self.dim == 0 || self.hidden_dim == 0 {
            return bad("dim and hidden_dim must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        self.cluster_spec().map(|_| ())
    }

    pub fn cluster_spec(&self) -> Result<ClusterSpec> {
        match &self.intervals {
            Some(s) => Ok(s.clone()),
            None => ClusterSpec::preset(self.k),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            intra: self.intra,
            inter: self.inter,
        }
    }
}

/// Aggregation weights for the bundle's models, in bundle order. DBI values
/// cached with the dataset are used when every model has one.
pub fn resolve_weights(bundle: &DatasetBundle, mode: WeightMode, spec: &ClusterSpec, exec: Exec) -> Result<Vec<f64>> {
    let n = bundle.tables().len();
    match mode {
        WeightMode::Uniform => Ok(vec![1.0 / n as f64; n]),
        WeightMode::Dbi => {
            let cached: Option<Vec<_>> = bundle
                .model_ids()
                .iter()
                .map(|id| {
                    bundle
                        .cached_dbi()
                        .get(*id)
                        .map(|&psi| crate::dbi::ModelScore::new(*id, psi))
                })
                .collect();
            let scores = match cached {
                Some(s) => s,
                None => {
                    let report = dbi_report(bundle, spec, Selection::All, exec)?;
                    bundle
                        .model_ids()
                        .iter()
                        .map(|id| {
                            let m = report.models.iter().find(|m| m.model_id == *id).expect("reported");
                            crate::dbi::ModelScore::new(*id, m.psi)
                        })
                        .collect()
                }
            };
            model_weights(&scores)
        }
    }
}

/// Loss and summed parameter gradient of one batch.
pub fn batch_gradient(
    params: &HeadParams,
    weights: &[f64],
    samples: &[&Sample],
    loss: &LossConfig,
    triplets: Option<&[Option<(usize, usize)>]>,
    exec: Exec,
) -> Result<(LossBreakdown, HeadParams)> {
    let preds: Vec<Prediction> = par::try_map(exec, samples, |s| params.predict(&s.feature_refs(), weights))?;
    let (breakdown, out_grads) = {
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let targets: Vec<f64> = samples.iter().map(|s| s.mos).collect();
        let features: Vec<Vec<&[f64]>> = preds.iter().map(Prediction::features).collect();
        let h: Vec<&[f64]> = preds.iter().map(|p| p.h.as_slice()).collect();
        let clusters: Vec<usize> = samples.iter().map(|s| s.cluster).collect();
        let batch = BatchOutputs {
            preds: &scores,
            targets: &targets,
            features: &features,
            h: &h,
            clusters: &clusters,
            triplets,
        };
        total_loss_with_grads(&batch, loss)?
    };
    let n_chunks = samples.len().div_ceil(GRAD_CHUNK);
    let partial: Vec<Result<HeadParams>> = par::map_range(exec, n_chunks, |c| {
        let mut g = params.zeros_like();
        for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(samples.len()) {
            params.backward_into(&preds[i], weights, &out_grads[i], &mut g)?;
        }
        Ok(g)
    });
    let mut total = params.zeros_like();
    for g in partial {
        total.add_assign(&g?);
    }
    Ok((breakdown, total))
}

/// Loss only, for finite-difference checks.
pub fn batch_loss(
    params: &HeadParams,
    weights: &[f64],
    samples: &[&Sample],
    loss: &LossConfig,
    triplets: Option<&[Option<(usize, usize)>]>,
) -> Result<LossBreakdown> {
    let preds: Vec<Prediction> = samples
        .iter()
        .map(|s| params.predict(&s.feature_refs(), weights))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    let features: Vec<Vec<&[f64]>> = preds.iter().map(Prediction::features).collect();
    let h: Vec<&[f64]> = preds.iter().map(|p| p.h.as_slice()).collect();
    let clusters: Vec<usize> = samples.iter().map(|s| s.cluster).collect();
    let batch = BatchOutputs {
        preds: &scores,
        targets: &targets,
        features: &features,
        h: &h,
        clusters: &clusters,
        triplets,
    };
    crate::losses::total_loss(&batch, loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub test_plcc: Option<f64>,
    pub test_srcc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,l1,intra,inter,total,test_plcc,test_srcc";

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "nan".to_owned(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss.l1,
            self.loss.intra,
            self.loss.inter,
            self.loss.total,
            opt(self.test_plcc),
            opt(self.test_srcc)
        )
    }
}

pub fn format_log(history: &[EpochRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.log_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub history: Vec<EpochRecord>,
    pub model_ids: Vec<String>,
    pub weights: Vec<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, bundle: &DatasetBundle, config: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            dataset: bundle.name().to_owned(),
            model_ids: self.model_ids.clone(),
            weights: self.weights.clone(),
            clusters: config.cluster_spec()?,
            split_seed: config.seed,
            train_fraction: config.train_fraction,
            params: self.params.clone(),
        })
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l1: avg(|l| l.l1),
        intra: avg(|l| l.intra),
        inter: avg(|l| l.inter),
        total: avg(|l| l.total),
        alpha: parts[0].alpha,
        beta: parts[0].beta,
        lonely_anchors: parts.iter().map(|l| l.lonely_anchors).sum(),
    }
}

fn check_finite(l: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    for (term, v) in [("smooth-l1", l.l1), ("intra", l.intra), ("inter", l.inter), ("total", l.total)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, epoch, step });
        }
    }
    Ok(())
}

/// Trains transform and regression heads on the train split of `bundle`.
///
/// `weights` holds one aggregation weight per bundle model, in bundle order.
/// Per-video training features are the mean over stored views; test-split
/// metrics average per-view scores.
pub fn train(bundle: &DatasetBundle, config: &TrainConfig, weights: &[f64]) -> Result<TrainOutcome> {
    config.validate()?;
    if !bundle.is_split() {
        return Err(Error::InvalidArgument("dataset must be split before training".into()));
    }
    let model_ids: Vec<String> = bundle.model_ids().into_iter().map(str::to_owned).collect();
    if weights.len() != model_ids.len() {
        return Err(Error::Shape(format!("{} weights for {} models", weights.len(), model_ids.len())));
    }
    let spec = config.cluster_spec()?;
    let assignment = assign_clusters(bundle.labels(), &spec)?;
    let tables = ordered_tables(bundle, &model_ids, None)?;
    let dims: Vec<usize> = tables.iter().map(|t| t.dim()).collect();
    let mut params = init_heads(&dims, config.dim, config.hidden_dim, config.seed)?;

    let outcome = |params: HeadParams, history| TrainOutcome {
        params,
        history,
        model_ids: model_ids.clone(),
        weights: weights.to_vec(),
    };
    if config.epochs == 0 {
        return Ok(outcome(params, Vec::new()));
    }

    let train_videos = bundle.videos_in(SplitFilter::Train);
    if train_videos.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    let samples = training_samples(bundle, &tables, &assignment, &train_videos)?;
    let test_samples = view_samples(bundle, &tables, &bundle.videos_in(SplitFilter::Test))?;
    let clusters: Vec<usize> = samples.iter().map(|s| s.cluster).collect();
    let loss_cfg = config.loss_config();
    let exec = config.exec;

    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = steps_per_epoch * config.warmup_epochs;
    let mut state = OptimState::new(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, HeadParams)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let batches = make_balanced_batches(&clusters, config.batch_size, config.seed, epoch)?;
        let mut parts = Vec::with_capacity(batches.len());
        let mut lr = 0.0;
        for batch in &batches {
            lr = lr_at(step, total_steps, warmup_steps, config.base_lr);
            let members: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
            let plan = (loss_cfg.inter == InterMode::SampleTriplet).then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6970_6c65);
                rng.set_stream(step as u64);
                let cl: Vec<usize> = members.iter().map(|s| s.cluster).collect();
                sample_triplets(&cl, &mut rng)
            });
            let (loss, grads) = batch_gradient(&params, weights, &members, &loss_cfg, plan.as_deref(), exec)?;
            check_finite(&loss, epoch + 1, step)?;
            adamw_step(&mut params, &grads, &mut state, lr, config.weight_decay)?;
            parts.push(loss);
            step += 1;
        }

        let (test_plcc, test_srcc) = if test_samples.len() >= 2 {
            let preds = predict_videos(&params, weights, &test_samples, ViewAveraging::Score, exec)?;
            let targets: Vec<f64> = test_samples.iter().map(|s| s.mos).collect();
            (plcc(&preds, &targets).ok(), srcc(&preds, &targets).ok())
        } else {
            (None, None)
        };
        if config.checkpoint == CheckpointPolicy::BestSrcc {
            if let Some(s) = test_srcc {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, params.clone()));
                }
            }
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: mean_breakdown(&parts),
            test_plcc,
            test_srcc,
        });
    }

    let params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok(outcome(params, history))
}
