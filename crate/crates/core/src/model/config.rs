use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the joint speech/text encoder–decoder.
///
/// `vocab_tgt` counts content tokens only; the decoder vocabulary adds BOS
/// and EOS after them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub feat_dim: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub speech_conv_layers: usize,
    pub conv_kernel: usize,
    pub private_speech_layers: usize,
    pub shared_encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Initial value of every head's monotonic energy bias.
    pub energy_init_bias: f64,
    /// Std-dev of Gaussian noise added to monotonic energies in training mode.
    pub energy_noise: f64,
    /// Causal self-attention in both encoders. A bidirectional encoder can
    /// only be streamed by re-encoding the received prefix.
    pub causal_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_src: 32,
            vocab_tgt: 32,
            feat_dim: 16,
            embed_dim: 64,
            ffn_dim: 128,
            heads: 4,
            speech_conv_layers: 2,
            conv_kernel: 3,
            private_speech_layers: 2,
            shared_encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            label_smoothing: 0.1,
            energy_init_bias: -1.0,
            energy_noise: 0.0,
            causal_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_src", self.vocab_src),
            ("vocab_tgt", self.vocab_tgt),
            ("feat_dim", self.feat_dim),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("speech_conv_layers", self.speech_conv_layers),
            ("conv_kernel", self.conv_kernel),
            ("private_speech_layers", self.private_speech_layers),
            ("shared_encoder_layers", self.shared_encoder_layers),
            ("decoder_layers", self.decoder_layers),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        for (name, v) in [("dropout", self.dropout), ("label_smoothing", self.label_smoothing)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.energy_noise < 0.0 {
            return Err(Error::Config("energy_noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Decoder vocabulary size including BOS and EOS.
    pub fn output_vocab(&self) -> usize {
        self.vocab_tgt + 2
    }

    pub fn bos(&self) -> usize {
        self.vocab_tgt
    }

    pub fn eos(&self) -> usize {
        self.vocab_tgt + 1
    }

    /// Total stride of the convolutional front end.
    pub fn speech_stride(&self) -> usize {
        1 << self.speech_conv_layers
    }

    /// Encoder positions produced from `frames` raw frames.
    pub fn speech_positions(&self, frames: usize) -> usize {
        (0..self.speech_conv_layers).fold(frames, |n, _| n.div_ceil(2))
    }

    /// Number of monotonic heads across all decoder layers.
    pub fn monotonic_heads(&self) -> usize {
        self.decoder_layers * self.heads
    }
}
