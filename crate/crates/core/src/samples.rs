//! Dense per-video feature views of a bundle, ordered by a model list.

use crate::dbi::ClusterAssignment;
use crate::error::{Error, Result};
use crate::feature_store::{DatasetBundle, FeatureTable};

/// One training sample: the view-averaged feature of every model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video_id: String,
    pub mos: f64,
    pub cluster: usize,
    /// `features[n]` belongs to the n-th model of the ordering.
    pub features: Vec<Vec<f64>>,
}

impl Sample {
    pub fn feature_refs(&self) -> Vec<&[f64]> {
        self.features.iter().map(Vec::as_slice).collect()
    }
}

/// All stored views of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub video_id: String,
    pub mos: f64,
    /// `views[v][n]`: view `v`, model `n`.
    pub views: Vec<Vec<Vec<f64>>>,
}

impl ViewSample {
    pub fn view_refs(&self, v: usize) -> Vec<&[f64]> {
        self.views[v].iter().map(Vec::as_slice).collect()
    }

    /// Per-model mean over views, taken around the first view so that
    /// duplicated views reproduce it exactly.
    pub fn mean_features(&self) -> Vec<Vec<f64>> {
        let n_views = self.views.len() as f64;
        let first = &self.views[0];
        let mut acc: Vec<Vec<f64>> = first.iter().map(|z| vec![0.0; z.len()]).collect();
        for view in &self.views[1..] {
            for ((a, z), z0) in acc.iter_mut().zip(view).zip(first) {
                for ((x, y), y0) in a.iter_mut().zip(z).zip(z0) {
                    *x += y - y0;
                }
            }
        }
        for (a, z0) in acc.iter_mut().zip(first) {
            for (x, y0) in a.iter_mut().zip(z0) {
                *x = y0 + *x / n_views;
            }
        }
        acc
    }
}

/// Tables of `bundle` in the order of `model_ids`, checking their dims.
pub fn ordered_tables<'a>(
    bundle: &'a DatasetBundle,
    model_ids: &[String],
    dims: Option<&[usize]>,
) -> Result<Vec<&'a FeatureTable>> {
    model_ids
        .iter()
        .enumerate()
        .map(|(n, id)| {
            let t = bundle.table(id).ok_or_else(|| Error::MissingModel(id.clone()))?;
            if let Some(d) = dims {
                if t.dim() != d[n] {
                    return Err(Error::Shape(format!(
                        "model {id}: dataset features have dim {}, checkpoint expects {}",
                        t.dim(),
                        d[n]
                    )));
                }
            }
            Ok(t)
        })
        .collect()
}

pub fn training_samples(
    bundle: &DatasetBundle,
    tables: &[&FeatureTable],
    assignment: &ClusterAssignment,
    videos: &[&str],
) -> Result<Vec<Sample>> {
    videos
        .iter()
        .map(|&v| {
            let mos = bundle.labels().get(v).ok_or_else(|| Error::Labels(format!("no label for {v}")))?;
            let cluster = assignment
                .get(v)
                .ok_or_else(|| Error::ClusterSpec(format!("video {v} has no cluster")))?;
            let features = tables
                .iter()
                .map(|t| {
                    t.mean_feature(v).ok_or_else(|| Error::Alignment {
                        model_id: t.model_id().to_owned(),
                        detail: format!("missing video {v}"),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Sample {
                video_id: v.to_owned(),
                mos,
                cluster,
                features,
            })
        })
        .collect()
}

pub fn view_samples(bundle: &DatasetBundle, tables: &[&FeatureTable], videos: &[&str]) -> Result<Vec<ViewSample>> {
    videos
        .iter()
        .map(|&v| {
            let mos = bundle.labels().get(v).ok_or_else(|| Error::Labels(format!("no label for {v}")))?;
            let indices = tables[0].view_indices(v);
            if indices.is_empty() {
                return Err(Error::Alignment {
                    model_id: tables[0].model_id().to_owned(),
                    detail: format!("missing video {v}"),
                });
            }
            let views = indices
                .iter()
                .map(|&i| {
                    tables
                        .iter()
                        .map(|t| {
                            t.get(v, i)
                                .map(|x| x.iter().map(|&e| f64::from(e)).collect())
                                .ok_or_else(|| Error::Alignment {
                                    model_id: t.model_id().to_owned(),
                                    detail: format!("video {v} lacks view {i}"),
                                })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            Ok(ViewSample {
                video_id: v.to_owned(),
                mos,
                views,
            })
        })
        .collect()
}
