//! JSON dataset manifests and `video_id,mos` label files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_feature_file, DatasetBundle, MosLabels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestModel {
    pub model_id: String,
    /// Feature file, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dbi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub models: Vec<ManifestModel>,
    pub labels: PathBuf,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads `video_id,mos` lines. A first line whose MOS column does not parse is
/// treated as a header.
pub fn read_labels(path: impl AsRef<Path>) -> Result<MosLabels> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Labels(format!("{}: {e}", path.display())))?;
    let mut entries = BTreeMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Labels(format!("{}: {e}", path.display())))?;
        if record.len() != 2 {
            return Err(Error::Labels(format!(
                "{} line {}: expected `video_id,mos`",
                path.display(),
                line + 1
            )));
        }
        let video = record[0].to_owned();
        let mos: f64 = match record[1].parse() {
            Ok(m) => m,
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(Error::Labels(format!(
                    "{} line {}: cannot parse MOS {:?}",
                    path.display(),
                    line + 1,
                    &record[1]
                )))
            }
        };
        if entries.insert(video.clone(), mos).is_some() {
            return Err(Error::Labels(format!("duplicate label for video {video}")));
        }
    }
    MosLabels::new(entries)
}

pub fn write_labels(labels: &MosLabels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("video_id,mos\n");
    for (v, mos) in labels.iter() {
        text.push_str(&format!("{v},{mos}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every feature file and the label file named by a manifest and checks
/// their alignment.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    if manifest.models.is_empty() {
        return Err(Error::Manifest("manifest lists no models".into()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let labels = read_labels(resolve(base, &manifest.labels))?;
    let mut tables = Vec::with_capacity(manifest.models.len());
    let mut dbi = BTreeMap::new();
    for m in &manifest.models {
        let table = read_feature_file(resolve(base, &m.path))?;
        if table.model_id() != m.model_id {
            return Err(Error::Manifest(format!(
                "file {} holds model {:?}, manifest says {:?}",
                m.path.display(),
                table.model_id(),
                m.model_id
            )));
        }
        if let Some(psi) = m.dbi {
            dbi.insert(m.model_id.clone(), psi);
        }
        tables.push(table);
    }
    Ok(DatasetBundle::new(manifest.name, tables, labels)?.with_cached_dbi(dbi))
}
