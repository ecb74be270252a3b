//! `PTMF` feature files.
//!
//! ```text
//! magic "PTMF" | version u16 | dim u32 | count u64 | model_id (u16 len + utf8)
//! index:   count × { video_id (u16 len + utf8) | view u32 | payload offset u64 }
//! payload: count × dim × f32, contiguous in index order
//! ```
//! All integers and floats are little-endian. Payload offsets are absolute
//! byte offsets from the start of the file.

use std::path::Path;

use super::FeatureTable;
use crate::bytes::{put_str, Reader};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"PTMF";
pub const FEATURE_VERSION: u16 = 1;

/// Smallest possible index record: empty id + view + offset.
const MIN_INDEX_RECORD: u64 = 2 + 4 + 8;

pub fn table_to_bytes(table: &FeatureTable) -> Result<Vec<u8>> {
    let dim = u32::try_from(table.dim())
        .map_err(|_| Error::InvalidArgument("feature dim exceeds u32".into()))?;
    let count = table.len() as u64;
    let mut out = Vec::new();
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    put_str(&mut out, table.model_id(), "model_id")?;

    let index_len: usize = table.iter().map(|(v, _, _)| 2 + v.len() + 4 + 8).sum();
    let payload_start = (out.len() + index_len) as u64;
    let stride = table.dim() as u64 * 4;
    for (i, (video, view, values)) in table.iter().enumerate() {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                video_id: video.to_owned(),
                view,
            });
        }
        put_str(&mut out, video, "video_id")?;
        out.extend_from_slice(&view.to_le_bytes());
        out.extend_from_slice(&(payload_start + i as u64 * stride).to_le_bytes());
    }
    debug_assert_eq!(out.len() as u64, payload_start);
    out.reserve(table.len() * table.dim() * 4);
    for (_, _, values) in table.iter() {
        for x in values {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_feature_file(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = table_to_bytes(table)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn table_from_bytes(buf: &[u8]) -> Result<FeatureTable> {
    let mut r = Reader::new(buf);
    let magic: [u8; 4] = r.array().ok_or(Error::TruncatedHeader("magic"))?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = r.u16().ok_or(Error::TruncatedHeader("version"))?;
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32().ok_or(Error::TruncatedHeader("dim"))? as usize;
    let count = r.u64().ok_or(Error::TruncatedHeader("entry count"))?;
    let model_id = r
        .string("model_id")?
        .ok_or(Error::TruncatedHeader("model_id"))?;
    if dim == 0 {
        return Err(Error::Format("dim is zero".into()));
    }
    if count.saturating_mul(MIN_INDEX_RECORD) > r.remaining() as u64 {
        return Err(Error::TruncatedIndex { entry: 0, count });
    }

    let mut index = Vec::with_capacity(count as usize);
    for entry in 0..count {
        let truncated = Error::TruncatedIndex { entry, count };
        let video = r.string("video_id")?.ok_or(truncated)?;
        let view = r.u32().ok_or(Error::TruncatedIndex { entry, count })?;
        let offset = r.u64().ok_or(Error::TruncatedIndex { entry, count })?;
        index.push((video, view, offset));
    }

    let payload_start = r.pos() as u64;
    let stride = dim as u64 * 4;
    let needed = count
        .checked_mul(stride)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let available = r.remaining() as u64;
    if available < needed {
        return Err(Error::TruncatedPayload { needed, available });
    }
    if available > needed {
        return Err(Error::CountMismatch {
            declared: count,
            detail: format!("{} trailing bytes after {count} entries", available - needed),
        });
    }

    let mut table = FeatureTable::new(model_id, dim)?;
    for (entry, (video, view, offset)) in index.into_iter().enumerate() {
        let expected = payload_start + entry as u64 * stride;
        if offset != expected {
            return Err(Error::BadOffset {
                entry: entry as u64,
                found: offset,
                expected,
            });
        }
        let raw = r.take(stride as usize).expect("payload length checked");
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        table.insert(video, view, values)?;
    }
    Ok(table)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    table_from_bytes(&buf)
}
