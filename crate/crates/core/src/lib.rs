//! Target network, attacks, per-layer autoencoders, features and the
//! detection evaluation protocol.
//!
//! Work that is independent per sample (inference, attacks, feature
//! extraction) runs in fixed-size chunks on the ambient rayon pool. Chunk
//! results are concatenated in order, so outputs do not depend on the
//! number of threads.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autoencoder;
pub mod csvio;
pub mod data;
mod error;
pub mod eval;
pub mod features;
pub mod net;
pub mod studies;

pub use error::{CoreError, Result};

use rayon::prelude::*;

/// Applies `f` to consecutive index chunks of `0..n` in parallel and returns
/// the results in chunk order.
pub fn par_map_chunks<R: Send>(
    n: usize,
    chunk: usize,
    f: impl Fn(Vec<usize>) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    let chunk = chunk.max(1);
    let ranges: Vec<Vec<usize>> = (0..n).step_by(chunk).map(|s| (s..(s + chunk).min(n)).collect()).collect();
    ranges.into_par_iter().map(f).collect()
}
