//! Per-model feature tables, MOS labels, dataset bundles and their on-disk forms.

mod format;
mod manifest;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub use format::{read_feature_file, table_from_bytes, table_to_bytes, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{load_dataset, read_labels, write_labels, Manifest, ManifestModel};
pub use split::{split_dataset, split_videos};
pub use synthetic::{gen_synthetic, synthetic_directions, write_synthetic, SyntheticSpec};

/// Dense features of one frozen backbone, keyed by `(video_id, view_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    model_id: String,
    dim: usize,
    entries: BTreeMap<(String, u32), Vec<f32>>,
}

impl FeatureTable {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be positive".into()));
        }
        Ok(Self {
            model_id: model_id.into(),
            dim,
            entries: BTreeMap::new(),
        })
    }

    /// Inserts one view vector, enforcing length, finiteness and key uniqueness.
    pub fn insert(&mut self, video_id: impl Into<String>, view: u32, values: Vec<f32>) -> Result<()> {
        let video_id = video_id.into();
        if values.len() != self.dim {
            return Err(Error::DimMismatch {
                video_id,
                view,
                len: values.len(),
                dim: self.dim,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { video_id, view });
        }
        let key = (video_id, view);
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateEntry {
                video_id: key.0,
                view,
            });
        }
        self.entries.insert(key, values);
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, video_id: &str, view: u32) -> Option<&[f32]> {
        self.entries
            .get(&(video_id.to_owned(), view))
            .map(Vec::as_slice)
    }

    /// All entries in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, &[f32])> {
        self.entries
            .iter()
            .map(|((v, i), x)| (v.as_str(), *i, x.as_slice()))
    }

    pub fn video_ids(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(v, _)| v.as_str()).collect()
    }

    /// Views stored for one video, ascending by view index.
    pub fn views<'a>(&'a self, video_id: &str) -> impl Iterator<Item = (u32, &'a [f32])> + 'a {
        let lo = (video_id.to_owned(), 0u32);
        let hi = (video_id.to_owned(), u32::MAX);
        self.entries
            .range(lo..=hi)
            .map(|((_, i), x)| (*i, x.as_slice()))
    }

    pub fn view_indices(&self, video_id: &str) -> Vec<u32> {
        self.views(video_id).map(|(i, _)| i).collect()
    }

    /// Mean over the stored views of a video, in f64, taken around the
    /// first view so that duplicated views reproduce it exactly.
    pub fn mean_feature(&self, video_id: &str) -> Option<Vec<f64>> {
        let mut views = self.views(video_id);
        let (_, first) = views.next()?;
        let mut acc = vec![0.0f64; self.dim];
        let mut n = 1usize;
        for (_, x) in views {
            for ((a, &v), &v0) in acc.iter_mut().zip(x).zip(first) {
                *a += f64::from(v) - f64::from(v0);
            }
            n += 1;
        }
        let n = n as f64;
        for (a, &v0) in acc.iter_mut().zip(first) {
            *a = f64::from(v0) + *a / n;
        }
        Some(acc)
    }
}

/// MOS per video, each in `[1, 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MosLabels {
    entries: BTreeMap<String, f64>,
}

impl MosLabels {
    pub fn new(entries: BTreeMap<String, f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Labels("label set is empty".into()));
        }
        for (video_id, &mos) in &entries {
            if !(1.0..=5.0).contains(&mos) {
                return Err(Error::MosOutOfRange {
                    video_id: video_id.clone(),
                    mos,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, video_id: &str) -> Option<f64> {
        self.entries.get(video_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn video_ids(&self) -> BTreeSet<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Which videos of a bundle an operation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Train,
    Test,
    All,
}

impl SplitFilter {
    pub fn admits(self, split: Option<Split>) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Train => split == Some(Split::Train),
            SplitFilter::Test => split == Some(Split::Test),
        }
    }
}

impl std::str::FromStr for SplitFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitFilter::Train),
            "test" => Ok(SplitFilter::Test),
            "all" => Ok(SplitFilter::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train, test or all"
            ))),
        }
    }
}

/// Aligned feature tables for several models plus labels and an optional split.
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    name: String,
    tables: Vec<FeatureTable>,
    labels: MosLabels,
    split: BTreeMap<String, Split>,
    cached_dbi: BTreeMap<String, f64>,
}

impl DatasetBundle {
    /// Checks that every table holds exactly the labelled videos and that all
    /// tables agree on the view set of each video.
    pub fn new(name: impl Into<String>, tables: Vec<FeatureTable>, labels: MosLabels) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::Manifest("dataset needs at least one feature table".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &tables {
            if !seen.insert(t.model_id()) {
                return Err(Error::Manifest(format!("model {} listed twice", t.model_id())));
            }
        }
        let wanted = labels.video_ids();
        for t in &tables {
            let have = t.video_ids();
            let missing: Vec<&str> = wanted.difference(&have).copied().collect();
            if !missing.is_empty() {
                return Err(Error::Alignment {
                    model_id: t.model_id().to_owned(),
                    detail: format!("missing videos: {}", missing.join(", ")),
                });
            }
            let extra: Vec<&str> = have.difference(&wanted).copied().collect();
            if !extra.is_empty() {
                return Err(Error::Alignment {
                    model_id: t.model_id().to_owned(),
                    detail: format!("videos without labels: {}", extra.join(", ")),
                });
            }
        }
        let reference = &tables[0];
        for video in &wanted {
            let views = reference.view_indices(video);
            for t in &tables[1..] {
                let other = t.view_indices(video);
                if other != views {
                    return Err(Error::Alignment {
                        model_id: t.model_id().to_owned(),
                        detail: format!(
                            "video {video} has views {other:?}, model {} has {views:?}",
                            reference.model_id()
                        ),
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            tables,
            labels,
            split: BTreeMap::new(),
            cached_dbi: BTreeMap::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tables(&self) -> &[FeatureTable] {
        &self.tables
    }

    pub fn table(&self, model_id: &str) -> Option<&FeatureTable> {
        self.tables.iter().find(|t| t.model_id() == model_id)
    }

    pub fn model_ids(&self) -> Vec<&str> {
        self.tables.iter().map(FeatureTable::model_id).collect()
    }

    pub fn labels(&self) -> &MosLabels {
        &self.labels
    }

    /// Sorted video ids.
    pub fn video_ids(&self) -> Vec<&str> {
        self.labels.video_ids().into_iter().collect()
    }

    pub fn n_videos(&self) -> usize {
        self.labels.len()
    }

    pub fn split_of(&self, video_id: &str) -> Option<Split> {
        self.split.get(video_id).copied()
    }

    pub fn is_split(&self) -> bool {
        !self.split.is_empty()
    }

    pub fn split(&self) -> &BTreeMap<String, Split> {
        &self.split
    }

    /// Sorted ids of the videos admitted by `filter`.
    pub fn videos_in(&self, filter: SplitFilter) -> Vec<&str> {
        self.video_ids()
            .into_iter()
            .filter(|v| filter.admits(self.split_of(v)))
            .collect()
    }

    pub fn with_split(mut self, split: BTreeMap<String, Split>) -> Result<Self> {
        let ids: BTreeSet<&str> = split.keys().map(String::as_str).collect();
        if ids != self.labels.video_ids() {
            return Err(Error::InvalidArgument(
                "split must assign every labelled video exactly once".into(),
            ));
        }
        self.split = split;
        Ok(self)
    }

    /// DBI values cached alongside the dataset (manifest `dbi` fields).
    pub fn cached_dbi(&self) -> &BTreeMap<String, f64> {
        &self.cached_dbi
    }

    pub fn with_cached_dbi(mut self, dbi: BTreeMap<String, f64>) -> Self {
        self.cached_dbi = dbi;
        self
    }

    /// Keeps only the named models, in the given order.
    pub fn select_models(&self, model_ids: &[&str]) -> Result<Self> {
        let mut tables = Vec::with_capacity(model_ids.len());
        for id in model_ids {
            let t = self
                .table(id)
                .ok_or_else(|| Error::MissingModel((*id).to_owned()))?;
            tables.push(t.clone());
        }
        Ok(Self {
            name: self.name.clone(),
            tables,
            labels: self.labels.clone(),
            split: self.split.clone(),
            cached_dbi: self.cached_dbi.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(id: &str, videos: &[(&str, u32)]) -> FeatureTable {
        let mut t = FeatureTable::new(id, 2).unwrap();
        for (v, i) in videos {
            t.insert(*v, *i, vec![0.5, 1.5]).unwrap();
        }
        t
    }

    fn labels(ids: &[&str]) -> MosLabels {
        MosLabels::new(ids.iter().map(|v| (v.to_string(), 3.0)).collect()).unwrap()
    }

    #[test]
    fn insert_rejects_wrong_length_nan_and_duplicates() {
        let mut t = FeatureTable::new("m", 2).unwrap();
        assert!(matches!(
            t.insert("a", 0, vec![1.0]),
            Err(Error::DimMismatch { len: 1, dim: 2, .. })
        ));
        assert!(matches!(
            t.insert("a", 0, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { .. })
        ));
        t.insert("a", 0, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            t.insert("a", 0, vec![1.0, 2.0]),
            Err(Error::DuplicateEntry { .. })
        ));
        assert!(FeatureTable::new("m", 0).is_err());
    }

    #[test]
    fn mean_feature_averages_views() {
        let mut t = FeatureTable::new("m", 2).unwrap();
        t.insert("a", 0, vec![1.0, 2.0]).unwrap();
        t.insert("a", 3, vec![3.0, 6.0]).unwrap();
        t.insert("b", 0, vec![9.0, 9.0]).unwrap();
        assert_eq!(t.mean_feature("a").unwrap(), vec![2.0, 4.0]);
        assert_eq!(t.view_indices("a"), vec![0, 3]);
        assert!(t.mean_feature("zz").is_none());
    }

    #[test]
    fn labels_reject_out_of_range_and_empty() {
        let mut m = BTreeMap::new();
        m.insert("v".to_string(), 5.3);
        assert!(matches!(MosLabels::new(m), Err(Error::MosOutOfRange { .. })));
        assert!(MosLabels::new(BTreeMap::new()).is_err());
    }

    #[test]
    fn bundle_names_missing_video() {
        let a = table("A", &[("v1", 0), ("v7", 0)]);
        let b = table("B", &[("v1", 0)]);
        let err = DatasetBundle::new("d", vec![a, b], labels(&["v1", "v7"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("v7") && msg.contains('B'), "{msg}");
    }

    #[test]
    fn bundle_requires_matching_views() {
        let a = table("A", &[("v1", 0), ("v1", 1)]);
        let b = table("B", &[("v1", 0)]);
        assert!(matches!(
            DatasetBundle::new("d", vec![a, b], labels(&["v1"])),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn split_filter_parse() {
        assert_eq!("test".parse::<SplitFilter>().unwrap(), SplitFilter::Test);
        assert!("dev".parse::<SplitFilter>().is_err());
    }
}
