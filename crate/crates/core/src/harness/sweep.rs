use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Model};
use crate::policy::{simulate_decode, DecisionTrace, EncoderMode, PolicyConfig, StreamInput};
use crate::training::{evaluate_quality, Branch, PairedExample};

use super::curves::{CurveMeta, CurvePoint, CurveSet};

pub const DEFAULT_STEP_FRAMES: [usize; 6] = [4, 8, 12, 16, 20, 24];

/// Streams `input` to the model `step_frames` source units per read and
/// decodes greedily. The hypothesis is the trace's output.
pub fn run_stream(model: &Model, input: StreamInput, step_frames: usize, mode: EncoderMode) -> Result<DecisionTrace> {
    if step_frames == 0 {
        return Err(Error::Config("step_frames must be at least 1".into()));
    }
    let trace = simulate_decode(model, input, &PolicyConfig::with_step(step_frames), mode, None)?;
    trace.check()?;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub checkpoints: Vec<PathBuf>,
    pub step_frames: Vec<usize>,
    pub mode: EncoderMode,
    pub out: PathBuf,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            checkpoints: Vec::new(),
            step_frames: DEFAULT_STEP_FRAMES.to_vec(),
            mode: EncoderMode::CausalIncremental,
            out: PathBuf::from("out"),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() || self.step_frames.is_empty() {
            return Err(Error::Config("sweep needs at least one checkpoint and one step size".into()));
        }
        if self.step_frames.contains(&0) {
            return Err(Error::Config("step_frames must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Every checkpoint at every step size on the speech branch of `test`.
/// Writes `curves.json` and `curves.csv` under `cfg.out`; when a checkpoint
/// is missing the points gathered so far are still written.
pub fn sweep(cfg: &SweepConfig, test: &[PairedExample], seed: u64, dataset_hash: &str) -> Result<CurveSet> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let mut set = CurveSet {
        meta: CurveMeta {
            seed,
            dataset_hash: dataset_hash.to_string(),
            timestamp: 0,
        },
        points: Vec::new(),
    };
    let mut steps = cfg.step_frames.clone();
    steps.sort_unstable();
    steps.dedup();
    let mut failure = None;
    for path in &cfg.checkpoints {
        let (model, meta) = match load_checkpoint(path) {
            Ok(m) => m,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let name = if meta.name.is_empty() {
            path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
        } else {
            meta.name.clone()
        };
        for &step in &steps {
            let r = evaluate_quality(&model, test, Some(step), cfg.mode, Branch::Speech)?.report;
            log::info!("{name} λ={} step {step}: AL {:.2} BLEU {:.2}", meta.lambda, r.al, r.bleu);
            set.points.push(CurvePoint {
                model: name.clone(),
                lambda: meta.lambda,
                step_frames: step,
                al: r.al,
                dal: r.dal,
                bleu: r.bleu,
                token_accuracy: r.token_accuracy,
            });
        }
    }
    set.sort();
    set.meta.timestamp = unix_time();
    set.write(&cfg.out)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(set),
    }
}
