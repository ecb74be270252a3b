//! MOS-interval pseudo clusters, the per-model Davies-Bouldin index and
//! DBI-driven model selection and weighting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{DatasetBundle, FeatureTable, MosLabels};
use crate::par::{self, Exec};

/// Ordered, contiguous MOS intervals covering `[1, 5]`.
///
/// Each interval is closed on the left and open on the right, except the last
/// which also contains 5.0: `[1,2), [2,2.5), ..., [4,5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct ClusterSpec {
    intervals: Vec<(f64, f64)>,
}

impl ClusterSpec {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        let err = |m: String| Err(Error::ClusterSpec(m));
        if intervals.len() < 2 {
            return err(format!("need K >= 2 intervals, got {}", intervals.len()));
        }
        if intervals[0].0 != 1.0 || intervals[intervals.len() - 1].1 != 5.0 {
            return err("intervals must cover [1, 5]".into());
        }
        for (k, &(p, q)) in intervals.iter().enumerate() {
            if p.partial_cmp(&q) != Some(std::cmp::Ordering::Less) {
                return err(format!("interval {k} is empty: ({p}, {q})"));
            }
            if let Some(&(next, _)) = intervals.get(k + 1) {
                if next != q {
                    return err(format!("interval {k} ends at {q} but interval {} starts at {next}", k + 1));
                }
            }
        }
        Ok(Self { intervals })
    }

    /// The interval sets used for K = 2, 4 and 6.
    pub fn preset(k: usize) -> Result<Self> {
        let cuts: &[f64] = match k {
            2 => &[1.0, 3.0, 5.0],
            4 => &[1.0, 2.0, 3.0, 4.0, 5.0],
            6 => &[1.0, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0],
            _ => return Err(Error::ClusterSpec(format!("no preset for K = {k}; use 2, 4 or 6"))),
        };
        Self::new(cuts.windows(2).map(|w| (w[0], w[1])).collect())
    }

    pub fn k(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Index of the interval containing `mos`.
    pub fn cluster_of(&self, mos: f64) -> Option<usize> {
        let last = self.intervals.len() - 1;
        self.intervals
            .iter()
            .position(|&(p, q)| mos >= p && mos < q)
            .or_else(|| (mos == self.intervals[last].1).then_some(last))
    }
}

impl TryFrom<Vec<(f64, f64)>> for ClusterSpec {
    type Error = Error;

    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClusterSpec> for Vec<(f64, f64)> {
    fn from(s: ClusterSpec) -> Self {
        s.intervals
    }
}

/// Cluster index per labelled video.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    k: usize,
    clusters: BTreeMap<String, usize>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, video_id: &str) -> Option<usize> {
        self.clusters.get(video_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.clusters.iter().map(|(v, k)| (v.as_str(), *k))
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &k in self.clusters.values() {
            sizes[k] += 1;
        }
        sizes
    }

    /// Restricts the assignment to the given videos.
    pub fn restrict<'a>(&self, videos: impl IntoIterator<Item = &'a str>) -> Self {
        let clusters = videos
            .into_iter()
            .filter_map(|v| self.get(v).map(|k| (v.to_owned(), k)))
            .collect();
        Self { k: self.k, clusters }
    }
}

pub fn assign_clusters(labels: &MosLabels, spec: &ClusterSpec) -> Result<ClusterAssignment> {
    let mut clusters = BTreeMap::new();
    for (video, mos) in labels.iter() {
        let k = spec.cluster_of(mos).ok_or_else(|| {
            Error::ClusterSpec(format!("MOS {mos} of video {video} falls outside every interval"))
        })?;
        clusters.insert(video.to_owned(), k);
    }
    Ok(ClusterAssignment { k: spec.k(), clusters })
}

/// ψ together with the per-cluster statistics it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct DbiScore {
    pub psi: f64,
    pub cluster_sizes: Vec<usize>,
    pub centroid_norms: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Davies-Bouldin index over the MOS clusters of one model's raw features.
///
/// Each video is represented by the mean of its views. Empty clusters are
/// skipped and the average runs over the nonempty ones.
pub fn compute_dbi(table: &FeatureTable, assignment: &ClusterAssignment) -> Result<DbiScore> {
    let mut points = Vec::with_capacity(assignment.clusters.len());
    for (video, c) in assignment.iter() {
        let z = table.mean_feature(video).ok_or_else(|| Error::Alignment {
            model_id: table.model_id().to_owned(),
            detail: format!("missing video {video}"),
        })?;
        points.push((c, z));
    }
    dbi_of_points(&points, assignment.k(), table.dim())
}

/// Davies-Bouldin index of labelled points `(cluster, feature)` with `k` clusters.
pub fn dbi_of_points(points: &[(usize, Vec<f64>)], k: usize, dim: usize) -> Result<DbiScore> {
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
    for (c, z) in points {
        if *c >= k || z.len() != dim {
            return Err(Error::Shape(format!("point in cluster {c} with length {}", z.len())));
        }
        members[*c].push(z);
    }
    let cluster_sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let present: Vec<usize> = (0..k).filter(|&c| cluster_sizes[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::TooFewClusters(present.len()));
    }

    let mut centroids = vec![vec![0.0; dim]; k];
    let mut scatter = vec![0.0; k];
    for &c in &present {
        let n = members[c].len() as f64;
        for z in &members[c] {
            for (acc, x) in centroids[c].iter_mut().zip(z.iter()) {
                *acc += x;
            }
        }
        centroids[c].iter_mut().for_each(|x| *x /= n);
        scatter[c] = members[c].iter().map(|z| dist(z, &centroids[c])).sum::<f64>() / n;
    }

    let mut total = 0.0;
    for &a in &present {
        let mut worst = f64::NEG_INFINITY;
        for &b in &present {
            if a == b {
                continue;
            }
            let sep = dist(&centroids[a], &centroids[b]);
            if sep == 0.0 {
                return Err(Error::DegenerateCentroids(a.min(b), a.max(b)));
            }
            worst = worst.max((scatter[a] + scatter[b]) / sep);
        }
        total += worst;
    }
    let centroid_norms = centroids
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Ok(DbiScore {
        psi: total / present.len() as f64,
        cluster_sizes,
        centroid_norms,
    })
}

/// One model's DBI ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    pub psi: f64,
}

impl ModelScore {
    pub fn new(model_id: impl Into<String>, psi: f64) -> Self {
        Self {
            model_id: model_id.into(),
            psi,
        }
    }
}

/// Aggregation weights `ω_n = 1 / ψ_n`, unnormalized.
pub fn model_weights(scores: &[ModelScore]) -> Result<Vec<f64>> {
    scores
        .iter()
        .map(|s| {
            if s.psi == 0.0 {
                Err(Error::ZeroDbi(s.model_id.clone()))
            } else if !(s.psi.is_finite() && s.psi > 0.0) {
                Err(Error::InvalidArgument(format!("DBI of {} is {}", s.model_id, s.psi)))
            } else {
                Ok(1.0 / s.psi)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    All,
    MaxModels(usize),
    Threshold(f64),
}

/// Sorts by ascending ψ (ties by model id) and keeps a prefix.
pub fn select_models(scores: &[ModelScore], rule: Selection) -> Result<Vec<ModelScore>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no models to select from".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.psi.total_cmp(&b.psi).then_with(|| a.model_id.cmp(&b.model_id)));
    match rule {
        Selection::All => Ok(sorted),
        Selection::MaxModels(0) => Err(Error::InvalidArgument("max_models must be positive".into())),
        Selection::MaxModels(n) => {
            sorted.truncate(n);
            Ok(sorted)
        }
        Selection::Threshold(t) => {
            let lowest = sorted[0].psi;
            sorted.retain(|s| s.psi <= t);
            if sorted.is_empty() {
                Err(Error::EmptySelection { threshold: t, lowest })
            } else {
                Ok(sorted)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDbi {
    pub model_id: String,
    pub psi: f64,
    pub weight: f64,
    /// 1-based position in the ψ-ascending order.
    pub rank: usize,
    pub selected: bool,
    pub cluster_sizes: Vec<usize>,
    pub centroid_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbiReport {
    pub dataset: String,
    pub intervals: ClusterSpec,
    /// Ascending by ψ.
    pub models: Vec<ModelDbi>,
}

impl DbiReport {
    pub fn selected(&self) -> Vec<&ModelDbi> {
        self.models.iter().filter(|m| m.selected).collect()
    }

    pub fn scores(&self) -> Vec<ModelScore> {
        self.models
            .iter()
            .map(|m| ModelScore::new(m.model_id.clone(), m.psi))
            .collect()
    }
}

/// Computes ψ for every model of a bundle (one task per model), ranks them and
/// marks the selection.
pub fn dbi_report(bundle: &DatasetBundle, spec: &ClusterSpec, rule: Selection, exec: Exec) -> Result<DbiReport> {
    let assignment = assign_clusters(bundle.labels(), spec)?;
    let scores = par::try_map(exec, bundle.tables(), |t| compute_dbi(t, &assignment))?;
    let model_scores: Vec<ModelScore> = bundle
        .tables()
        .iter()
        .zip(&scores)
        .map(|(t, s)| ModelScore::new(t.model_id(), s.psi))
        .collect();
    let ranked = select_models(&model_scores, Selection::All)?;
    let chosen = select_models(&model_scores, rule)?;
    let weights = model_weights(&ranked)?;
    let models = ranked
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (m, weight))| {
            let idx = bundle.model_ids().iter().position(|id| *id == m.model_id).expect("model exists");
            ModelDbi {
                model_id: m.model_id.clone(),
                psi: m.psi,
                weight,
                rank: i + 1,
                selected: chosen.iter().any(|c| c.model_id == m.model_id),
                cluster_sizes: scores[idx].cluster_sizes.clone(),
                centroid_norms: scores[idx].centroid_norms.clone(),
            }
        })
        .collect();
    Ok(DbiReport {
        dataset: bundle.name().to_owned(),
        intervals: spec.clone(),
        models,
    })
}
