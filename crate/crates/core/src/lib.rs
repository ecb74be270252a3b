//! Video quality regression on top of frozen pretrained-model features.
//!
//! Features from several frozen backbones are mapped by small learnable
//! transform heads into a shared space, fused with weights derived from each
//! backbone's Davies-Bouldin index over MOS clusters, and regressed to a
//! quality score. Training combines smooth-L1 regression with an
//! intra-consistency term (agreement between backbones) and a centroid-based
//! inter-divisibility term (separation of MOS clusters).

mod bytes;
pub mod checkpoint;
pub mod dbi;
pub mod error;
pub mod evaluator;
pub mod feature_store;
pub mod losses;
pub mod model;
pub mod par;
pub mod samples;
pub mod trainer;

pub use error::{Error, Result};
pub use par::Exec;
