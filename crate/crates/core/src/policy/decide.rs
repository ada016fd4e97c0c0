//! Inference-time read/write decisions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderOutput;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub decision_threshold: f64,
    /// Source units (frames or tokens) consumed per READ.
    pub step_frames: usize,
    /// Optional cap on source units ever consumed.
    pub max_source: Option<usize>,
    /// Sample `z ~ Bernoulli(p)` with this seed instead of thresholding.
    pub sample_seed: Option<u64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            decision_threshold: 0.5,
            step_frames: 8,
            max_source: None,
            sample_seed: None,
        }
    }
}

impl PolicyConfig {
    pub fn with_step(step_frames: usize) -> Self {
        PolicyConfig {
            step_frames,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::Config("decision_threshold must lie in (0, 1)".into()));
        }
        if self.step_frames == 0 {
            return Err(Error::Config("step_frames must be at least 1".into()));
        }
        if self.max_source == Some(0) {
            return Err(Error::Config("max_source must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Read,
    Write,
}

/// Deterministic rule: WRITE iff `p ≥ threshold`.
pub fn infer_decide(p: f64, cfg: &PolicyConfig) -> Decision {
    if p >= cfg.decision_threshold {
        Decision::Write
    } else {
        Decision::Read
    }
}

/// Threshold or seeded-sampling decision maker.
#[derive(Clone, Debug)]
pub struct Decider {
    threshold: f64,
    rng: Option<ChaCha8Rng>,
}

impl Decider {
    pub fn new(cfg: &PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Decider {
            threshold: cfg.decision_threshold,
            rng: cfg.sample_seed.map(ChaCha8Rng::seed_from_u64),
        })
    }

    pub fn decide(&mut self, p: f64) -> Decision {
        let write = match &mut self.rng {
            Some(rng) => rng.gen::<f64>() < p,
            None => p >= self.threshold,
        };
        if write {
            Decision::Write
        } else {
            Decision::Read
        }
    }
}

/// Encoder states that grow as the source is read.
pub trait EncoderSource {
    /// Encoder rows currently available.
    fn available(&self) -> usize;
    /// Row-major states, at least `available()` rows.
    fn states(&self) -> &[f64];
    /// Consumes one more chunk of source; `false` once the source is
    /// exhausted (nothing was read).
    fn read(&mut self) -> Result<bool>;
}

/// Moves one head forward from `start` until it writes. Positions past the
/// available rows trigger reads; once the source is exhausted the head is
/// forced to write at the last row.
pub fn advance_head(
    start: usize,
    source: &mut dyn EncoderSource,
    decider: &mut Decider,
    mut write_prob: impl FnMut(&[f64], usize) -> f64,
) -> Result<usize> {
    let mut j = start;
    loop {
        while j >= source.available() {
            if !source.read()? {
                return match source.available() {
                    0 => Err(Error::Input("empty source stream".into())),
                    n => Ok(n - 1),
                };
            }
        }
        if decider.decide(write_prob(source.states(), j)) == Decision::Write {
            return Ok(j);
        }
        j += 1;
    }
}

/// Precomputed encoder states revealed a fixed number of rows per read.
pub struct FixedSource<'e> {
    enc: &'e EncoderOutput,
    rows_per_read: usize,
    shown: usize,
    pub reads: usize,
}

impl<'e> FixedSource<'e> {
    pub fn new(enc: &'e EncoderOutput, rows_per_read: usize) -> Self {
        FixedSource {
            enc,
            rows_per_read: rows_per_read.max(1),
            shown: 0,
            reads: 0,
        }
    }
}

impl EncoderSource for FixedSource<'_> {
    fn available(&self) -> usize {
        self.shown
    }

    fn states(&self) -> &[f64] {
        &self.enc.states.data
    }

    fn read(&mut self) -> Result<bool> {
        if self.shown >= self.enc.valid_len {
            return Ok(false);
        }
        self.shown = (self.shown + self.rows_per_read).min(self.enc.valid_len);
        self.reads += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn enc(rows: usize) -> EncoderOutput {
        EncoderOutput {
            states: Tensor::zeros(&[rows, 1]),
            valid_len: rows,
        }
    }

    #[test]
    fn threshold_rule() {
        let cfg = PolicyConfig::default();
        assert_eq!(infer_decide(0.7, &cfg), Decision::Write);
        assert_eq!(infer_decide(0.5, &cfg), Decision::Write);
        assert_eq!(infer_decide(0.3, &cfg), Decision::Read);
    }

    #[test]
    fn config_invariants() {
        assert!(PolicyConfig { decision_threshold: 1.0, ..Default::default() }.validate().is_err());
        assert!(PolicyConfig::with_step(0).validate().is_err());
        assert!(PolicyConfig::with_step(1).validate().is_ok());
    }

    #[test]
    fn exhausted_stream_forces_write_at_last() {
        let e = enc(4);
        let mut src = FixedSource::new(&e, 4);
        let mut d = Decider::new(&PolicyConfig::default()).unwrap();
        let j = advance_head(0, &mut src, &mut d, |_, _| 0.3).unwrap();
        assert_eq!(j, 3);
        assert_eq!(src.reads, 1);
    }

    #[test]
    fn reads_only_when_needed() {
        let e = enc(6);
        let mut src = FixedSource::new(&e, 2);
        let mut d = Decider::new(&PolicyConfig::default()).unwrap();
        let j = advance_head(0, &mut src, &mut d, |_, j| if j == 2 { 0.9 } else { 0.1 }).unwrap();
        assert_eq!((j, src.available()), (2, 4));
        // a head may stay where it is
        let j = advance_head(2, &mut src, &mut d, |_, j| if j == 2 { 0.9 } else { 0.1 }).unwrap();
        assert_eq!((j, src.available()), (2, 4));
    }

    #[test]
    fn empty_source_is_an_error() {
        let e = enc(0);
        let mut src = FixedSource::new(&e, 1);
        let mut d = Decider::new(&PolicyConfig::default()).unwrap();
        assert!(advance_head(0, &mut src, &mut d, |_, _| 1.0).is_err());
    }

    // Two heads over one revealed stream: the token is emitted when the
    // slower head commits, and each head keeps its own position.
    #[test]
    fn two_heads_slowest_gates_emission() {
        let e = enc(5);
        let mut src = FixedSource::new(&e, 1);
        let mut d = Decider::new(&PolicyConfig::default()).unwrap();
        let p_fast = |_: &[f64], j: usize| if j >= 1 { 0.8 } else { 0.2 };
        let p_slow = |_: &[f64], j: usize| if j >= 3 { 0.8 } else { 0.2 };
        let t0 = advance_head(0, &mut src, &mut d, p_fast).unwrap();
        let t1 = advance_head(0, &mut src, &mut d, p_slow).unwrap();
        assert_eq!((t0, t1), (1, 3));
        // path semantics: the fast head alone would have needed 2 rows
        assert_eq!(src.available(), 4);
        assert_eq!(src.reads, 4);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let cfg = PolicyConfig {
            sample_seed: Some(3),
            ..Default::default()
        };
        let mut a = Decider::new(&cfg).unwrap();
        let mut b = Decider::new(&cfg).unwrap();
        let xs: Vec<_> = (0..50).map(|_| a.decide(0.4)).collect();
        let ys: Vec<_> = (0..50).map(|_| b.decide(0.4)).collect();
        assert_eq!(xs, ys);
        assert!(xs.contains(&Decision::Read) && xs.contains(&Decision::Write));
    }
}
