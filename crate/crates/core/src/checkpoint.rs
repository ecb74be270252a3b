//! `PTMC` checkpoint files: everything needed to run inference without a manifest.
//!
//! ```text
//! magic "PTMC" | version u16 | D u32 | D_hidden u32 | n_models u32
//! dataset (u16 len + utf8) | split_seed u64 | train_fraction f64
//! K u32 | K × (lower f64, upper f64)
//! n_models × { model_id (u16 len + utf8) | dim u32 | weight f64 }
//! n_models × { w1 | b1 | norm1_gain | norm1_bias | w2 | b2 | norm2_gain | norm2_bias }
//! w_reg (D × f64) | b_reg f64
//! ```
//! Little-endian throughout; parameter blobs are f64.

use std::path::Path;

use crate::bytes::{put_str, Reader};
use crate::dbi::ClusterSpec;
use crate::error::{Error, Result};
use crate::model::{HeadParams, TransformHead};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PTMC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Name of the dataset the heads were trained on.
    pub dataset: String,
    pub model_ids: Vec<String>,
    /// Aggregation weight per model.
    pub weights: Vec<f64>,
    pub clusters: ClusterSpec,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub params: HeadParams,
}

fn u32_of(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::InvalidArgument(format!("{what} exceeds u32")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.n_models();
        if self.model_ids.len() != n || self.weights.len() != n {
            return Err(Error::Shape("checkpoint model ids, weights and heads disagree".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.params.out_dim(), "D")?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.params.hidden_dim(), "D_hidden")?.to_le_bytes());
        out.extend_from_slice(&u32_of(n, "model count")?.to_le_bytes());
        put_str(&mut out, &self.dataset, "dataset")?;
        out.extend_from_slice(&self.split_seed.to_le_bytes());
        out.extend_from_slice(&self.train_fraction.to_le_bytes());
        out.extend_from_slice(&u32_of(self.clusters.k(), "K")?.to_le_bytes());
        for (p, q) in self.clusters.intervals() {
            out.extend_from_slice(&p.to_le_bytes());
            out.extend_from_slice(&q.to_le_bytes());
        }
        for ((id, w), head) in self.model_ids.iter().zip(&self.weights).zip(&self.params.heads) {
            put_str(&mut out, id, "model_id")?;
            out.extend_from_slice(&u32_of(head.input_dim, "dim")?.to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
        }
        for (_, _, t) in self.params.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic: [u8; 4] = r.array().ok_or(Error::TruncatedHeader("magic"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u16().ok_or(Error::TruncatedHeader("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let short = |what| Error::TruncatedHeader(what);
        let out_dim = r.u32().ok_or(short("D"))? as usize;
        let hidden = r.u32().ok_or(short("D_hidden"))? as usize;
        let n = r.u32().ok_or(short("model count"))? as usize;
        let dataset = r.string("dataset")?.ok_or(short("dataset"))?;
        let split_seed = r.u64().ok_or(short("split seed"))?;
        let train_fraction = r.f64().ok_or(short("train fraction"))?;
        let k = r.u32().ok_or(short("K"))? as usize;
        if k.saturating_mul(16) > r.remaining() {
            return Err(short("intervals"));
        }
        let mut intervals = Vec::with_capacity(k);
        for _ in 0..k {
            let p = r.f64().ok_or(short("intervals"))?;
            let q = r.f64().ok_or(short("intervals"))?;
            intervals.push((p, q));
        }
        let clusters = ClusterSpec::new(intervals)?;
        if n.saturating_mul(14) > r.remaining() {
            return Err(short("model table"));
        }
        let mut model_ids = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut heads = Vec::with_capacity(n);
        for _ in 0..n {
            model_ids.push(r.string("model_id")?.ok_or(short("model table"))?);
            let dim = r.u32().ok_or(short("model table"))? as usize;
            weights.push(r.f64().ok_or(short("model table"))?);
            heads.push(TransformHead::zeros(dim, hidden, out_dim));
        }
        let mut params = HeadParams {
            heads,
            w_reg: vec![0.0; out_dim],
            b_reg: 0.0,
        };
        let needed = params.n_params() as u64 * 8;
        let available = r.remaining() as u64;
        if available < needed {
            return Err(Error::TruncatedPayload { needed, available });
        }
        if available > needed {
            return Err(Error::Format(format!("{} trailing bytes after parameters", available - needed)));
        }
        for (_, _, t) in params.tensors_mut() {
            for x in t.iter_mut() {
                *x = r.f64().expect("length checked");
            }
        }
        if !params.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Self {
            dataset,
            model_ids,
            weights,
            clusters,
            split_seed,
            train_fraction,
            params,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
