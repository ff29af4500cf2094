//! JSON run configuration for the command-line tool.
//!
//! Every section is optional and unknown keys are rejected. Defaults:
//! `tau1 = 0.15`, `tau2 = 0.3`, block size 3, `2x2x2` patches, cache window 6,
//! 4 denoising steps from noise level 0.4, recovery with `m = "all"` and clean
//! cache sourcing.
//!
//! ```json
//! {
//!   "prune": { "tau1": 0.15, "tau2": 0.3, "block_size": 3 },
//!   "recovery": { "m": "all", "noise_aware": true },
//!   "denoiser": { "n_blocks": 2, "model_dim": 64, "n_heads": 4, "window": 6 },
//!   "noise_seed": 0,
//!   "input": "latents.ltns",
//!   "output": "restored.ltns"
//! }
//! ```
//!
//! `"recovery": null` selects direct pruning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::ToyDenoiserConfig;
use crate::domain::PruneConfig;
use crate::error::Result;
use crate::pipeline::PipelineConfig;
use crate::recovery::RecoveryConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub prune: PruneConfig,
    pub recovery: Option<RecoveryConfig>,
    pub denoiser: ToyDenoiserConfig,
    pub compare_baseline: bool,
    pub noise_seed: u64,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub stats: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            prune: p.prune,
            recovery: p.recovery,
            denoiser: p.denoiser,
            compare_baseline: p.compare_baseline,
            noise_seed: p.noise_seed,
            input: None,
            output: None,
            stats: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.prune.validate()?;
        self.denoiser.validate()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            prune: self.prune.clone(),
            denoiser: self.denoiser,
            recovery: self.recovery,
            compare_baseline: self.compare_baseline,
            noise_seed: self.noise_seed,
        }
    }
}
