//! Meta-level machinery for portfolio- and selector-based AutoML systems.
//!
//! This crate operates on *performance matrices*: grids of checkpointed
//! learning curves recorded offline for a set of candidate configurations
//! across a set of datasets. On top of that substrate it provides
//!
//! * greedy portfolio construction with a brute-force optimum for bound
//!   checking ([`portfolio`]),
//! * holdout / cross-validation / successive-halving estimators of a
//!   portfolio's loss on a dataset ([`strategies`]),
//! * time-bounded replay of a portfolio against recorded wall times
//!   ([`portfolio::replay_with_budget`]),
//! * per-dataset policy selection via pairwise weighted decision forests
//!   with a dominance-based fallback ([`selector`]),
//! * greedy post-hoc ensemble selection ([`ensemble`]),
//! * ADTM normalization, sampled average ranks and the sign /
//!   Wilcoxon signed-rank tests ([`metrics`]), and
//! * an end-to-end experiment harness ([`harness`]).
//!
//! All operations are deterministic given their seeds; parallel execution
//! reduces results in a fixed order so thread counts never change output.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod portfolio;
pub mod selector;
pub mod strategies;

pub use data::{
    Allocation, Checkpoint, DatasetMeta, LearningCurve, MatrixEntry, PerformanceMatrix, Policy,
    Portfolio, Validation,
};
pub use error::{Error, Result};
pub use metrics::NormalizationStats;

/// Derives an independent sub-seed from a master seed and a stream index.
///
/// SplitMix64 finalizer; used everywhere a seeded computation fans out into
/// independent parallel streams (per dataset, per tree, per pair) so that
/// results do not depend on execution order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
