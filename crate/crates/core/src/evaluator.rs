//! PLCC / SRCC and checkpoint evaluation with multi-view score averaging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::feature_store::{load_dataset, DatasetBundle, SplitFilter};
use crate::model::HeadParams;
use crate::par::{self, Exec};
use crate::samples::{ordered_tables, view_samples, ViewSample};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("series lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::DegenerateSeries("need at least 2 points"));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn plcc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSeries("zero variance"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn srcc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    plcc(&average_ranks(preds), &average_ranks(targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_videos: usize,
    pub views_per_video: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub mean: f64,
    /// The dataset is the one the checkpoint was trained on.
    pub in_domain: bool,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, preds: &[f64], targets: &[f64], views_per_video: usize) -> Result<Self> {
        let plcc = plcc(preds, targets)?;
        let srcc = srcc(preds, targets)?;
        Ok(Self {
            dataset: dataset.into(),
            n_videos: preds.len(),
            views_per_video,
            plcc,
            srcc,
            mean: (plcc + srcc) / 2.0,
            in_domain: false,
        })
    }

    pub const CSV_HEADER: &'static str = "dataset,n,plcc,srcc,mean";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.dataset, self.n_videos, self.plcc, self.srcc, self.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// How the views of one video become one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewAveraging {
    /// Predict every view, average the scores.
    #[default]
    Score,
    /// Average the features over views, predict once.
    Feature,
}

pub fn predict_video(params: &HeadParams, weights: &[f64], sample: &ViewSample, averaging: ViewAveraging) -> Result<f64> {
    match averaging {
        ViewAveraging::Score => {
            // Averaged around the first view's score, so duplicated views
            // reproduce it exactly.
            let first = params.predict(&sample.view_refs(0), weights)?.score;
            let mut offset = 0.0;
            for v in 1..sample.views.len() {
                offset += params.predict(&sample.view_refs(v), weights)?.score - first;
            }
            Ok(first + offset / sample.views.len() as f64)
        }
        ViewAveraging::Feature => {
            let mean = sample.mean_features();
            let refs: Vec<&[f64]> = mean.iter().map(Vec::as_slice).collect();
            Ok(params.predict(&refs, weights)?.score)
        }
    }
}

pub fn predict_videos(
    params: &HeadParams,
    weights: &[f64],
    samples: &[ViewSample],
    averaging: ViewAveraging,
    exec: Exec,
) -> Result<Vec<f64>> {
    par::try_map(exec, samples, |s| predict_video(params, weights, s, averaging))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub averaging: ViewAveraging,
    pub exec: Exec,
}

/// Per-video scores of a checkpoint on the admitted videos of a bundle.
pub fn predict_bundle(
    checkpoint: &Checkpoint,
    bundle: &DatasetBundle,
    filter: SplitFilter,
    opts: EvalOptions,
) -> Result<Vec<(String, f64, f64)>> {
    let samples = bundle_view_samples(checkpoint, bundle, filter)?;
    let scores = predict_videos(&checkpoint.params, &checkpoint.weights, &samples, opts.averaging, opts.exec)?;
    Ok(samples
        .into_iter()
        .zip(scores)
        .map(|(s, p)| (s.video_id, s.mos, p))
        .collect())
}

fn bundle_view_samples(checkpoint: &Checkpoint, bundle: &DatasetBundle, filter: SplitFilter) -> Result<Vec<ViewSample>> {
    let dims = checkpoint.params.input_dims();
    let tables = ordered_tables(bundle, &checkpoint.model_ids, Some(&dims))?;
    if filter != SplitFilter::All && !bundle.is_split() {
        return Err(Error::InvalidArgument("dataset has no train/test split".into()));
    }
    let videos = bundle.videos_in(filter);
    view_samples(bundle, &tables, &videos)
}

pub fn evaluate(checkpoint: &Checkpoint, bundle: &DatasetBundle, filter: SplitFilter, opts: EvalOptions) -> Result<EvalReport> {
    let samples = bundle_view_samples(checkpoint, bundle, filter)?;
    let preds = predict_videos(&checkpoint.params, &checkpoint.weights, &samples, opts.averaging, opts.exec)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    let views = samples.iter().map(|s| s.views.len()).max().unwrap_or(0);
    let mut report = EvalReport::new(bundle.name(), &preds, &targets, views)?;
    report.in_domain = bundle.name() == checkpoint.dataset;
    Ok(report)
}

/// Evaluates on every video of another dataset, no split.
pub fn cross_evaluate(checkpoint: &Checkpoint, manifest: impl AsRef<Path>, opts: EvalOptions) -> Result<EvalReport> {
    let bundle = load_dataset(manifest)?;
    evaluate(checkpoint, &bundle, SplitFilter::All, opts)
}
