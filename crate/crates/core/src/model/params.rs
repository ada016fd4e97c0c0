use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::config::ModelConfig;

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Input(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds every parameter onto `tape` by reference.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub norm_attn: NormIds,
    pub attn: AttnIds,
    pub norm_ffn: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIds {
    pub norm_self: NormIds,
    pub self_attn: AttnIds,
    pub norm_mono: NormIds,
    pub mono: AttnIds,
    pub energy_bias: usize,
    pub norm_ffn: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub weight: usize,
    pub bias: usize,
}

/// Parameter ids grouped by architectural role.
#[derive(Clone, Debug)]
pub struct Layout {
    pub speech_conv: Vec<ConvIds>,
    pub speech_layers: Vec<EncoderLayerIds>,
    pub text_embed: usize,
    pub shared_layers: Vec<EncoderLayerIds>,
    /// Input row appended once the whole source has arrived.
    pub source_end: usize,
    pub encoder_norm: NormIds,
    pub target_embed: usize,
    pub decoder_layers: Vec<DecoderLayerIds>,
    pub decoder_norm: NormIds,
    pub out_weight: usize,
    pub out_bias: usize,
}

/// Registers (and initializes, when `rng` is given) every parameter.
pub(crate) struct Builder<'r> {
    pub store: ParamStore,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Builder<'r> {
    pub fn new(rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Builder {
            store: ParamStore::default(),
            rng,
        }
    }

    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data = match (&mut self.rng, init) {
            (_, Init::Const(c)) => vec![c; n],
            (None, _) => vec![0.0; n],
            (Some(rng), Init::Xavier { fan_in, fan_out }) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            (Some(rng), Init::Normal(std)) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(*rng)).collect()
            }
        };
        self.store.insert(&name, Tensor::new(shape.to_vec(), data)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<usize> {
        self.add(name.to_string(), &[fan_in, fan_out], Init::Xavier { fan_in, fan_out })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Const(1.0))?,
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Const(0.0))?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.linear(&format!("{prefix}.wq"), d, d)?,
            wk: self.linear(&format!("{prefix}.wk"), d, d)?,
            wv: self.linear(&format!("{prefix}.wv"), d, d)?,
            wo: self.linear(&format!("{prefix}.wo"), d, d)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.linear(&format!("{prefix}.w1"), d, f)?,
            b1: self.add(format!("{prefix}.b1"), &[f], Init::Const(0.0))?,
            w2: self.linear(&format!("{prefix}.w2"), f, d)?,
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Const(0.0))?,
        })
    }

    fn encoder_layer(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<EncoderLayerIds> {
        let d = cfg.embed_dim;
        Ok(EncoderLayerIds {
            norm_attn: self.norm(&format!("{prefix}.norm_attn"), d)?,
            attn: self.attn(&format!("{prefix}.attn"), d)?,
            norm_ffn: self.norm(&format!("{prefix}.norm_ffn"), d)?,
            ffn: self.ffn(&format!("{prefix}.ffn"), d, cfg.ffn_dim)?,
        })
    }

    pub fn build(&mut self, cfg: &ModelConfig) -> Result<Layout> {
        let d = cfg.embed_dim;
        let mut speech_conv = Vec::new();
        let mut channels = cfg.feat_dim;
        for l in 0..cfg.speech_conv_layers {
            let fan_in = channels * cfg.conv_kernel;
            speech_conv.push(ConvIds {
                weight: self.linear(&format!("speech.conv{l}.weight"), fan_in, d)?,
                bias: self.add(format!("speech.conv{l}.bias"), &[d], Init::Const(0.0))?,
            });
            channels = d;
        }
        let speech_layers = (0..cfg.private_speech_layers)
            .map(|l| self.encoder_layer(&format!("speech.layer{l}"), cfg))
            .collect::<Result<_>>()?;
        let text_embed = self.add(
            "text.embed".into(),
            &[cfg.vocab_src, d],
            Init::Normal((d as f64).powf(-0.5)),
        )?;
        let shared_layers = (0..cfg.shared_encoder_layers)
            .map(|l| self.encoder_layer(&format!("shared.layer{l}"), cfg))
            .collect::<Result<_>>()?;
        let source_end = self.add("shared.source_end".into(), &[1, d], Init::Normal((d as f64).powf(-0.5)))?;
        let encoder_norm = self.norm("shared.final_norm", d)?;
        let target_embed = self.add(
            "decoder.embed".into(),
            &[cfg.output_vocab(), d],
            Init::Normal((d as f64).powf(-0.5)),
        )?;
        let mut decoder_layers = Vec::new();
        for l in 0..cfg.decoder_layers {
            let prefix = format!("decoder.layer{l}");
            decoder_layers.push(DecoderLayerIds {
                norm_self: self.norm(&format!("{prefix}.norm_self"), d)?,
                self_attn: self.attn(&format!("{prefix}.self_attn"), d)?,
                norm_mono: self.norm(&format!("{prefix}.norm_mono"), d)?,
                mono: self.attn(&format!("{prefix}.mono"), d)?,
                energy_bias: self.add(
                    format!("{prefix}.mono.energy_bias"),
                    &[cfg.heads],
                    Init::Const(cfg.energy_init_bias),
                )?,
                norm_ffn: self.norm(&format!("{prefix}.norm_ffn"), d)?,
                ffn: self.ffn(&format!("{prefix}.ffn"), d, cfg.ffn_dim)?,
            });
        }
        let decoder_norm = self.norm("decoder.final_norm", d)?;
        let out_weight = self.linear("decoder.out.weight", d, cfg.output_vocab())?;
        let out_bias = self.add("decoder.out.bias".into(), &[cfg.output_vocab()], Init::Const(0.0))?;
        Ok(Layout {
            speech_conv,
            speech_layers,
            text_embed,
            shared_layers,
            source_end,
            encoder_norm,
            target_embed,
            decoder_layers,
            decoder_norm,
            out_weight,
            out_bias,
        })
    }
}

#[derive(Clone, Copy)]
enum Init {
    Const(f64),
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
}

/// Prefixes of parameters used only by one branch.
pub const SPEECH_ONLY_PREFIX: &str = "speech.";
pub const TEXT_ONLY_PREFIX: &str = "text.";
