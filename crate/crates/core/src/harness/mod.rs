//! Streaming evaluation driver: step-size sweeps, latency–quality curves
//! and paired comparison of curve sets.

mod checks;
mod compare;
mod curves;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::EncoderMode;
use crate::training::TrainConfig;

pub use checks::{
    alignment_oracle_check, brute_force_alignment, frozen_term_values, grad_check, loss_gradient_check, term_gradients, term_values,
    toy_config, toy_example, TermGradCheck, LOSS_TERMS, REL_ERR_FLOOR,
};
pub use compare::{compare, Comparison, PairedPoint};
pub use curves::{CurveMeta, CurvePoint, CurveSet, CURVES_CSV_HEADER};
pub use sweep::{run_stream, sweep, unix_time, SweepConfig, DEFAULT_STEP_FRAMES};

/// Flat JSON config read by every command: training fields plus the sweep
/// settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub step_frames: Vec<usize>,
    pub encoder_mode: EncoderMode,
    /// Checkpoints to evaluate; empty means those `train` writes to the
    /// output directory.
    pub checkpoints: Vec<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            step_frames: DEFAULT_STEP_FRAMES.to_vec(),
            encoder_mode: EncoderMode::CausalIncremental,
            checkpoints: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn checkpoint_paths(&self, out: &Path) -> Vec<PathBuf> {
        if !self.checkpoints.is_empty() {
            return self.checkpoints.clone();
        }
        std::iter::once(0.0)
            .chain(self.train.lambdas.iter().copied())
            .map(|l| out.join(self.train.checkpoint_name(l)))
            .collect()
    }

    pub fn sweep_config(&self, out: &Path) -> SweepConfig {
        SweepConfig {
            checkpoints: self.checkpoint_paths(out),
            step_frames: self.step_frames.clone(),
            mode: self.encoder_mode,
            out: out.to_path_buf(),
        }
    }
}
