use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // binary containers
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated header: {0}")]
    TruncatedHeader(&'static str),
    #[error("truncated index at entry {entry} of {count}")]
    TruncatedIndex { entry: u64, count: u64 },
    #[error("truncated payload: need {needed} bytes, file has {available}")]
    TruncatedPayload { needed: u64, available: u64 },
    #[error("declared entry count {declared} does not match payload ({detail})")]
    CountMismatch { declared: u64, detail: String },
    #[error("entry {entry}: payload offset {found} should be {expected}")]
    BadOffset { entry: u64, found: u64, expected: u64 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid utf-8 in {0}")]
    InvalidUtf8(&'static str),

    // table / dataset invariants
    #[error("feature vector for ({video_id}, view {view}) has length {len}, expected {dim}")]
    DimMismatch {
        video_id: String,
        view: u32,
        len: usize,
        dim: usize,
    },
    #[error("non-finite feature value in ({video_id}, view {view})")]
    NonFinite { video_id: String, view: u32 },
    #[error("duplicate entry ({video_id}, view {view})")]
    DuplicateEntry { video_id: String, view: u32 },
    #[error("MOS {mos} for video {video_id} is outside [1, 5]")]
    MosOutOfRange { video_id: String, mos: f64 },
    #[error("alignment failure in model {model_id}: {detail}")]
    Alignment { model_id: String, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("labels: {0}")]
    Labels(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // clustering
    #[error("invalid cluster spec: {0}")]
    ClusterSpec(String),
    #[error("need at least 2 nonempty clusters, found {0}")]
    TooFewClusters(usize),
    #[error("degenerate centroids: clusters {0} and {1} coincide")]
    DegenerateCentroids(usize, usize),
    #[error("DBI of model {0} is zero; its weight 1/psi is undefined")]
    ZeroDbi(String),
    #[error("no model has DBI <= {threshold} (lowest is {lowest}); loosen the threshold")]
    EmptySelection { threshold: f64, lowest: f64 },

    // model / losses
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero-norm feature vector for model {0}; cosine similarity undefined")]
    ZeroNorm(usize),
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    // evaluation
    #[error("degenerate series: {0}")]
    DegenerateSeries(&'static str),
    #[error("model {0} is missing from the dataset")]
    MissingModel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
