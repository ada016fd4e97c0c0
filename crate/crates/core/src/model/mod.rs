//! Joint speech/text encoder–decoder with a shared monotonic decoder.
//!
//! The speech branch runs raw frames through two causal stride-2
//! convolutions and private layers before the encoder layers it shares with
//! the text branch. Both branches feed one decoder whose cross-attention is
//! hard monotonic attention, trained in expectation.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::ModelConfig;
pub use decoder::{Attention, DecoderState, DecoderVars, StepOutput};
pub use encoder::EncoderCache;
pub use layers::{sinusoidal, Fwd, KvCache, TrainNoise};
pub use params::{Layout, ParamStore, SPEECH_ONLY_PREFIX, TEXT_ONLY_PREFIX};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use params::Builder;

/// Raw "speech" input: `[T×feat_dim]` frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub frames: Tensor,
}

impl FrameSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape.len() != 2 {
            return Err(Error::Input(format!("frames must be 2-D, got {:?}", frames.shape)));
        }
        Ok(FrameSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.shape[1]
    }

    /// Flat data of the first `n` frames.
    pub fn prefix(&self, n: usize) -> &[f64] {
        &self.frames.data[..n * self.feat_dim()]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        TokenSequence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(tokens: Vec<usize>) -> Self {
        TokenSequence { tokens }
    }
}

/// Encoder states `[N×embed_dim]`; rows at or beyond `valid_len` are never
/// attended.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub valid_len: usize,
}

impl EncoderOutput {
    pub fn row(&self, j: usize) -> &[f64] {
        let d = self.states.cols();
        &self.states.data[j * d..(j + 1) * d]
    }

    /// Flat data of the valid rows.
    pub fn valid_data(&self) -> &[f64] {
        &self.states.data[..self.valid_len * self.states.cols()]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

impl Model {
    /// Randomly initialized model.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut builder = Builder::new(Some(&mut rng));
        let layout = builder.build(&cfg)?;
        Ok(Model {
            cfg,
            params: builder.store,
            layout,
        })
    }

    /// Rebuilds a model from named tensors; every expected parameter must be
    /// present with its expected shape and nothing else may be.
    pub fn from_named(cfg: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let mut builder = Builder::new(None);
        let layout = builder.build(&cfg)?;
        let mut store = builder.store;
        if named.len() != store.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                store.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let slot = store
                .get_mut(&name)
                .ok_or_else(|| Error::Input(format!("unexpected parameter {name}")))?;
            if slot.shape != t.shape {
                return Err(Error::shape("checkpoint", &slot.shape, &t.shape));
            }
            slot.data = t.data;
        }
        Ok(Model {
            cfg,
            params: store,
            layout,
        })
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Parameter ids used by only the text branch.
    pub fn text_only_params(&self) -> Vec<usize> {
        self.params_with_prefix(TEXT_ONLY_PREFIX)
    }

    pub fn speech_only_params(&self) -> Vec<usize> {
        self.params_with_prefix(SPEECH_ONLY_PREFIX)
    }

    /// Makes every write probability `σ(bias)`: zeroes the monotonic query
    /// projections and fills the energy biases.
    pub fn set_constant_policy(&mut self, bias: f64) {
        for l in 0..self.cfg.decoder_layers {
            if let Some(wq) = self.params.get_mut(&format!("decoder.layer{l}.mono.wq")) {
                wq.data.fill(0.0);
            }
            if let Some(b) = self.params.get_mut(&format!("decoder.layer{l}.mono.energy_bias")) {
                b.data.fill(bias);
            }
        }
    }

    fn params_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }
}
