//! Smooth-L1 regression, intra-consistency and centroid inter-divisibility
//! losses, and the combined objective `L1 + β (mean intra + mean inter)`,
//! each with analytic gradients at the network outputs.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OutputGrads;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.2;

/// Huber loss with threshold 1.
pub fn smooth_l1(pred: f64, target: f64) -> f64 {
    let e = pred - target;
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

/// ∂ smooth_l1 / ∂ pred.
pub fn smooth_l1_grad(pred: f64, target: f64) -> f64 {
    let e = pred - target;
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

/// Mean smooth-L1 over a batch.
pub fn smooth_l1_mean(preds: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = preds.iter().zip(targets).map(|(p, t)| smooth_l1(*p, *t)).sum();
    sum / preds.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean pairwise cosine distance between the transformed features of one sample.
pub fn intra_loss(features: &[&[f64]]) -> Result<f64> {
    intra_loss_with_grad(features).map(|(v, _)| v)
}

/// Intra loss and its gradient with respect to every `f_n`.
pub fn intra_loss_with_grad(features: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument("intra loss needs at least 2 models".into()));
    }
    let norms: Vec<f64> = features.iter().map(|f| dot(f, f).sqrt()).collect();
    if let Some(bad) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::ZeroNorm(bad));
    }
    let scale = 2.0 / (n * (n - 1)) as f64;
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; features[0].len()]; n];
    for a in 0..n {
        for b in a + 1..n {
            let na_nb = norms[a] * norms[b];
            let cos = dot(features[a], features[b]) / na_nb;
            value += 1.0 - cos;
            // ∂(1 − cos)/∂f_a = −f_b/(|a||b|) + cos f_a/|a|²
            let ca = cos / (norms[a] * norms[a]);
            let cb = cos / (norms[b] * norms[b]);
            for i in 0..features[a].len() {
                grads[a][i] += scale * (ca * features[a][i] - features[b][i] / na_nb);
                grads[b][i] += scale * (cb * features[b][i] - features[a][i] / na_nb);
            }
        }
    }
    Ok((scale * value, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub center: Vec<f64>,
    pub count: usize,
}

/// Per-cluster mean of the aggregated features present in a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchCentroids {
    pub clusters: BTreeMap<usize, Centroid>,
}

impl BatchCentroids {
    pub fn get(&self, k: usize) -> Option<&Centroid> {
        self.clusters.get(&k)
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

pub fn batch_centroids(h: &[&[f64]], clusters: &[usize]) -> Result<BatchCentroids> {
    if h.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if h.len() != clusters.len() {
        return Err(Error::Shape(format!("{} samples but {} cluster ids", h.len(), clusters.len())));
    }
    let d = h[0].len();
    let mut out: BTreeMap<usize, Centroid> = BTreeMap::new();
    for (x, &k) in h.iter().zip(clusters) {
        let c = out.entry(k).or_insert_with(|| Centroid {
            center: vec![0.0; d],
            count: 0,
        });
        for (acc, v) in c.center.iter_mut().zip(x.iter()) {
            *acc += v;
        }
        c.count += 1;
    }
    for c in out.values_mut() {
        let n = c.count as f64;
        c.center.iter_mut().for_each(|v| *v /= n);
    }
    Ok(BatchCentroids { clusters: out })
}

/// One anchor's inter-divisibility term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterTerm {
    pub value: f64,
    /// Cluster of the hardest (nearest) negative centroid; `None` when the
    /// anchor's cluster is alone in the batch.
    pub negative: Option<usize>,
}

/// `max(‖h − c_k‖² − ‖h − c_t‖² + α, 0)` with `c_t` the nearest other centroid.
pub fn inter_loss(h: &[f64], cluster: usize, centroids: &BatchCentroids, alpha: f64) -> Result<InterTerm> {
    let own = centroids
        .get(cluster)
        .ok_or_else(|| Error::InvalidArgument(format!("cluster {cluster} has no centroid in this batch")))?;
    let negative = centroids
        .clusters
        .iter()
        .filter(|(k, _)| **k != cluster)
        .map(|(k, c)| (*k, sq_dist(h, &c.center)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    Ok(match negative {
        None => InterTerm {
            value: 0.0,
            negative: None,
        },
        Some((t, neg)) => InterTerm {
            value: (sq_dist(h, &own.center) - neg + alpha).max(0.0),
            negative: Some(t),
        },
    })
}

/// Which inter-sample term the objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InterMode {
    /// Anchor against its own and the hardest other cluster centroid.
    #[default]
    Centroid,
    /// Plain triplet with a random in-batch positive and negative sample.
    SampleTriplet,
    Off,
}

impl std::str::FromStr for InterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centroid" => Ok(InterMode::Centroid),
            "sample-triplet" => Ok(InterMode::SampleTriplet),
            "off" => Ok(InterMode::Off),
            other => Err(Error::InvalidArgument(format!(
                "unknown inter mode {other:?}; expected centroid, sample-triplet or off"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub intra: bool,
    pub inter: InterMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            intra: true,
            inter: InterMode::Centroid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Anchors that had no negative cluster in their batch.
    pub lonely_anchors: usize,
}

/// Network outputs of one batch, sample-major.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutputs<'a> {
    pub preds: &'a [f64],
    pub targets: &'a [f64],
    /// `features[i][n]` is `f_n` of sample `i`.
    pub features: &'a [Vec<&'a [f64]>],
    pub h: &'a [&'a [f64]],
    pub clusters: &'a [usize],
    /// `(positive, negative)` sample indices per anchor, for `SampleTriplet`.
    pub triplets: Option<&'a [Option<(usize, usize)>]>,
}

impl BatchOutputs<'_> {
    fn validate(&self) -> Result<()> {
        let b = self.preds.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if self.targets.len() != b || self.features.len() != b || self.h.len() != b || self.clusters.len() != b {
            return Err(Error::Shape("batch arrays differ in length".into()));
        }
        if let Some(t) = self.triplets {
            if t.len() != b {
                return Err(Error::Shape("one triplet slot per anchor required".into()));
            }
        }
        Ok(())
    }
}

/// Draws a random positive (same cluster, not the anchor) and negative (other
/// cluster) for every anchor.
pub fn sample_triplets<R: Rng + ?Sized>(clusters: &[usize], rng: &mut R) -> Vec<Option<(usize, usize)>> {
    (0..clusters.len())
        .map(|i| {
            let pos: Vec<usize> = (0..clusters.len()).filter(|&j| j != i && clusters[j] == clusters[i]).collect();
            let neg: Vec<usize> = (0..clusters.len()).filter(|&j| clusters[j] != clusters[i]).collect();
            Some((*pos.choose(rng)?, *neg.choose(rng)?))
        })
        .collect()
}

pub fn total_loss(batch: &BatchOutputs<'_>, cfg: &LossConfig) -> Result<LossBreakdown> {
    total_loss_with_grads(batch, cfg).map(|(l, _)| l)
}

/// Combined objective and its gradients at each sample's score, `h` and `f_n`.
#[allow(clippy::needless_range_loop)]
pub fn total_loss_with_grads(batch: &BatchOutputs<'_>, cfg: &LossConfig) -> Result<(LossBreakdown, Vec<OutputGrads>)> {
    batch.validate()?;
    let b = batch.preds.len();
    let inv_b = 1.0 / b as f64;
    let n_models = batch.features[0].len();
    let d = batch.h[0].len();
    let mut grads: Vec<OutputGrads> = (0..b).map(|_| OutputGrads::zeros(n_models, d)).collect();

    let l1 = smooth_l1_mean(batch.preds, batch.targets);
    for (g, (p, t)) in grads.iter_mut().zip(batch.preds.iter().zip(batch.targets)) {
        g.score = inv_b * smooth_l1_grad(*p, *t);
    }

    let metric_scale = cfg.beta * inv_b;
    let mut intra = 0.0;
    if cfg.intra && n_models >= 2 {
        for (i, fs) in batch.features.iter().enumerate() {
            let (v, gf) = intra_loss_with_grad(fs)?;
            intra += v;
            for (dst, src) in grads[i].f.iter_mut().zip(gf) {
                for (a, s) in dst.iter_mut().zip(src) {
                    *a += metric_scale * s;
                }
            }
        }
        intra *= inv_b;
    }

    let mut inter = 0.0;
    let mut lonely = 0;
    match cfg.inter {
        InterMode::Off => {}
        InterMode::Centroid => {
            let cents = batch_centroids(batch.h, batch.clusters)?;
            for i in 0..b {
                let k = batch.clusters[i];
                let term = inter_loss(batch.h[i], k, &cents, cfg.alpha)?;
                let Some(t) = term.negative else {
                    lonely += 1;
                    continue;
                };
                inter += term.value;
                if term.value <= 0.0 {
                    continue;
                }
                let ck = &cents.clusters[&k];
                let ct = &cents.clusters[&t];
                let share_k = 1.0 / ck.count as f64;
                let share_t = 1.0 / ct.count as f64;
                for e in 0..d {
                    let u = batch.h[i][e] - ck.center[e];
                    let w = batch.h[i][e] - ct.center[e];
                    grads[i].h[e] += metric_scale * 2.0 * (u - w);
                    for j in 0..b {
                        if batch.clusters[j] == k {
                            grads[j].h[e] -= metric_scale * 2.0 * u * share_k;
                        } else if batch.clusters[j] == t {
                            grads[j].h[e] += metric_scale * 2.0 * w * share_t;
                        }
                    }
                }
            }
            inter *= inv_b;
        }
        InterMode::SampleTriplet => {
            let triplets = batch
                .triplets
                .ok_or_else(|| Error::InvalidArgument("sample-triplet mode needs sampled triplets".into()))?;
            for (i, slot) in triplets.iter().enumerate() {
                let Some((p, n)) = *slot else {
                    lonely += 1;
                    continue;
                };
                let hi = batch.h[i];
                let v = (sq_dist(hi, batch.h[p]) - sq_dist(hi, batch.h[n]) + cfg.alpha).max(0.0);
                inter += v;
                if v <= 0.0 {
                    continue;
                }
                for e in 0..d {
                    let u = hi[e] - batch.h[p][e];
                    let w = hi[e] - batch.h[n][e];
                    grads[i].h[e] += metric_scale * 2.0 * (u - w);
                    grads[p].h[e] -= metric_scale * 2.0 * u;
                    grads[n].h[e] += metric_scale * 2.0 * w;
                }
            }
            inter *= inv_b;
        }
    }

    let total = l1 + cfg.beta * (intra + inter);
    Ok((
        LossBreakdown {
            l1,
            intra,
            inter,
            total,
            alpha: cfg.alpha,
            beta: cfg.beta,
            lonely_anchors: lonely,
        },
        grads,
    ))
}
