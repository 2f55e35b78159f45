//! Implicit-clip text-to-video retrieval at desk scale.
//!
//! The crate implements a Gaussian-windowed transformer retrieval model
//! (multi-scale windowed attention blocks, two-branch video encoder,
//! triplet + infoNCE + query-diverse objectives), a synthetic corpus
//! generator with planted moments, rank-based evaluation, and a
//! scanning-based explicit-clip baseline used for storage/latency
//! comparisons.

pub mod baseline;
pub mod block;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod objectives;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{Error, Result};

/// Honors the `GMMF_THREADS` environment variable by capping the global
/// worker pool. Call once at process start; later calls are no-ops.
pub fn init_thread_pool_from_env() {
    if let Ok(v) = std::env::var("GMMF_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
