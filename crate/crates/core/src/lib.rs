//! Frequency-aware feature distillation for embedding-based recommenders.
//!
//! The crate is organized around a small pipeline:
//!
//! - [`data`]: interaction ingestion, activity filtering, chronological splits
//! - [`graph`]: KNN / bipartite graph construction and normalized Laplacians
//! - [`filter`]: polynomial spectral filters applied through sparse products
//! - [`spectral`]: dense eigendecomposition, frequency components, and the
//!   identity checks that tie the filter path to the spectral path
//! - [`models`]: BPRMF and LightGCN embedding backbones with analytic gradients
//! - [`distill`]: projector, FitNet and frequency-reweighted distillation losses
//! - [`train`]: training drivers (plain, distilled, group-ablation) with
//!   validation-based early stopping
//! - [`eval`]: full-ranking Recall@N / NDCG@N

pub mod data;
pub mod distill;
pub mod eval;
pub mod filter;
pub mod graph;
pub mod models;
pub mod spectral;
pub mod train;

pub use graph::FeatureMatrix;

/// Caps the global thread pool used for internal parallelism.
///
/// Call once at process start, before any parallel work runs. Later calls are
/// ignored once the pool exists.
pub fn set_thread_cap(threads: usize) {
    if threads >= 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
