//! Latent inter-frame pruning with attention recovery.
//!
//! Redundant latent patches are detected and pruned before denoising, the
//! attention of the full sequence is rebuilt from the kept tokens by
//! duplicating rotated keys and values, and pruned patches are forward-filled
//! afterwards.

pub mod attention;
pub mod config;
pub mod denoiser;
pub mod domain;
pub mod error;
pub mod filters;
pub mod fixtures;
pub mod kv_cache;
pub mod latency;
pub mod ltns;
pub mod noise;
pub mod pipeline;
pub mod prune;
pub mod recovery;
pub mod redundancy;
pub mod report;
pub mod restore;

pub use attention::{exact_attention, rope_rotate, AttentionSpec, HeadConfig, Position, RoPEConfig, TokenRows, TokenSequence};
pub use config::RunConfig;
pub use denoiser::{ToyDenoiser, ToyDenoiserConfig};
pub use domain::{patchify, unpatchify, KeepMaskSequence, LatentGrid, PatchDims, PatchGrid, PruneConfig};
pub use error::{Error, Result};
pub use kv_cache::{cache_append, KvCache};
pub use latency::{latency_sweep, LatencyCurve, LatencySample};
pub use ltns::Tensor;
pub use pipeline::{commutation_gap, run_pipeline, GapReport, PipelineConfig, PipelineStats};
pub use prune::{lif_prune, prune_rate};
pub use recovery::{build_plan, expand_duplicates, recovered_attention, Degree, RecoveryConfig, RunLengthPlan};
pub use restore::{extract_kept, restore, PrunedPatchSet};
