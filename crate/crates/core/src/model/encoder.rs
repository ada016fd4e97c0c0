use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

use super::layers::{Fwd, KvCache};
use super::params::EncoderLayerIds;
use super::{EncoderOutput, FrameSequence, Model, TokenSequence};

/// Per-layer self-attention caches and the states produced so far, for
/// extending a causal encoding as more source arrives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderCache {
    pub layers: Vec<KvCache>,
    pub states: Vec<f64>,
    pub rows: usize,
    /// The end-of-source row has been appended.
    pub closed: bool,
}

impl Model {
    fn check_frames(&self, frames: &FrameSequence) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Input("empty frame sequence".into()));
        }
        if frames.feat_dim() != self.cfg.feat_dim {
            return Err(Error::Input(format!(
                "frames have {} features, model expects {}",
                frames.feat_dim(),
                self.cfg.feat_dim
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_src) {
            return Err(Error::Input(format!(
                "source token {bad} out of vocabulary {}",
                self.cfg.vocab_src
            )));
        }
        Ok(())
    }

    /// Causal strided convolutions: `[T×feat]` → `[ceil(T/4)×D]`.
    pub(crate) fn speech_front(&self, f: &mut Fwd, frames: Var) -> Result<Var> {
        let mut x = frames;
        for conv in &self.layout.speech_conv {
            let cols = f.t.im2col_causal(x, self.cfg.conv_kernel, 2)?;
            let y = f.linear(cols, conv.weight, Some(conv.bias))?;
            x = f.t.relu(y);
        }
        Ok(x)
    }

    fn run_layers(
        &self,
        f: &mut Fwd,
        mut x: Var,
        layers: &[&EncoderLayerIds],
        mut caches: Option<&mut [KvCache]>,
    ) -> Result<Var> {
        for (l, ids) in layers.iter().enumerate() {
            let cache = caches.as_deref_mut().map(|c| &mut c[l]);
            x = f.encoder_layer(x, ids, cache, self.cfg.causal_encoder)?;
        }
        f.norm(x, self.layout.encoder_norm)
    }

    fn speech_layers(&self) -> Vec<&EncoderLayerIds> {
        self.layout.speech_layers.iter().chain(&self.layout.shared_layers).collect()
    }

    fn text_layers(&self) -> Vec<&EncoderLayerIds> {
        self.layout.shared_layers.iter().collect()
    }

    /// Scaled end-of-source row at position `offset`.
    fn end_row(&self, f: &mut Fwd, offset: usize) -> Result<Var> {
        let e = f.param(self.layout.source_end);
        let e = f.t.scale(e, (self.cfg.embed_dim as f64).sqrt());
        f.add_positions(e, offset)
    }

    /// Appends the end-of-source row after the `x` rows when `complete`.
    fn close(&self, f: &mut Fwd, x: Var, complete: bool) -> Result<Var> {
        if !complete {
            return Ok(x);
        }
        let n = f.t.shape(x)[0];
        let end = self.end_row(f, n)?;
        f.t.concat_rows(&[x, end])
    }

    fn speech_states(&self, f: &mut Fwd, frames: Var, complete: bool) -> Result<Var> {
        let x = self.speech_front(f, frames)?;
        let x = f.add_positions(x, 0)?;
        let x = self.close(f, x, complete)?;
        self.run_layers(f, x, &self.speech_layers(), None)
    }

    fn text_states(&self, f: &mut Fwd, tokens: &[usize], complete: bool) -> Result<Var> {
        self.check_tokens(tokens)?;
        let x = self.embed_source(f, tokens, 0)?;
        let x = self.close(f, x, complete)?;
        self.run_layers(f, x, &self.text_layers(), None)
    }

    /// Speech encoder on the tape for a complete utterance `[T×feat]`:
    /// `ceil(T/4) + 1` rows, the last one for the end of the source.
    pub(crate) fn encode_speech_vars(&self, f: &mut Fwd, frames: Var) -> Result<Var> {
        self.speech_states(f, frames, true)
    }

    pub(crate) fn embed_source(&self, f: &mut Fwd, tokens: &[usize], offset: usize) -> Result<Var> {
        let e = f.t.embedding(f.param(self.layout.text_embed), tokens)?;
        let e = f.t.scale(e, (self.cfg.embed_dim as f64).sqrt());
        f.add_positions(e, offset)
    }

    /// Text encoder on the tape (shared layers only) for a complete
    /// sentence: `|x| + 1` rows.
    pub(crate) fn encode_text_vars(&self, f: &mut Fwd, tokens: &[usize]) -> Result<Var> {
        self.text_states(f, tokens, true)
    }

    fn eval_fwd<'t, 'a>(&self, tape: &'t mut Tape<'a>, p: &'t [Var]) -> Fwd<'t, 'a> {
        Fwd {
            t: tape,
            p,
            noise: None,
            heads: self.cfg.heads,
        }
    }

    fn encode_text_eval(&self, tokens: &[usize], complete: bool) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut f = self.eval_fwd(&mut tape, &p);
        let h = self.text_states(&mut f, tokens, complete)?;
        let states = tape.to_tensor(h);
        Ok(EncoderOutput {
            valid_len: states.rows(),
            states,
        })
    }

    fn encode_speech_eval(&self, frames: &FrameSequence, n_frames: usize) -> Result<EncoderOutput> {
        self.check_frames(frames)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut f = self.eval_fwd(&mut tape, &p);
        let x = f.t.constant(&[n_frames, self.cfg.feat_dim], frames.prefix(n_frames).to_vec())?;
        let h = self.speech_states(&mut f, x, n_frames >= frames.len())?;
        let states = tape.to_tensor(h);
        Ok(EncoderOutput {
            valid_len: states.rows(),
            states,
        })
    }

    /// Eval-mode encoding of a complete sentence on the text branch.
    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<EncoderOutput> {
        self.encode_text_eval(&tokens.tokens, true)
    }

    /// Eval-mode encoding of a complete utterance on the speech branch;
    /// `ceil(T/4) + 1` output rows.
    pub fn encode_speech(&self, frames: &FrameSequence) -> Result<EncoderOutput> {
        self.encode_speech_eval(frames, frames.len())
    }

    pub fn new_encoder_cache(&self, speech: bool) -> EncoderCache {
        let n = if speech {
            self.layout.speech_layers.len() + self.layout.shared_layers.len()
        } else {
            self.layout.shared_layers.len()
        };
        EncoderCache {
            layers: vec![KvCache::default(); n],
            states: Vec::new(),
            rows: 0,
            closed: false,
        }
    }

    fn require_causal(&self) -> Result<()> {
        if self.cfg.causal_encoder {
            Ok(())
        } else {
            Err(Error::Contract(
                "incremental encoding needs a causal encoder; use prefix re-encoding".into(),
            ))
        }
    }

    /// Runs `fresh` input rows (positions from `cache.rows`) through the
    /// layers, closing the source when `complete`.
    fn extend_cache(
        &self,
        f: &mut Fwd,
        cache: &mut EncoderCache,
        fresh: Option<Var>,
        complete: bool,
        layers: &[&EncoderLayerIds],
    ) -> Result<()> {
        let mut parts: Vec<Var> = fresh.into_iter().collect();
        let n = cache.rows + parts.iter().map(|&x| f.t.shape(x)[0]).sum::<usize>();
        if complete {
            parts.push(self.end_row(f, n)?);
        }
        if parts.is_empty() {
            return Ok(());
        }
        let x = if parts.len() == 1 { parts[0] } else { f.t.concat_rows(&parts)? };
        let added = f.t.shape(x)[0];
        let h = self.run_layers(f, x, layers, Some(&mut cache.layers))?;
        cache.states.extend_from_slice(f.t.value(h));
        cache.rows += added;
        cache.closed |= complete;
        Ok(())
    }

    /// Extends `cache` with the encoder positions that became computable
    /// from the first `n_frames` frames, plus the end row once every frame
    /// has arrived.
    pub fn extend_speech(&self, cache: &mut EncoderCache, frames: &FrameSequence, n_frames: usize) -> Result<()> {
        self.require_causal()?;
        let avail = self.cfg.speech_positions(n_frames);
        let complete = n_frames >= frames.len() && !cache.closed;
        if avail <= cache.rows && !complete {
            return Ok(());
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut f = self.eval_fwd(&mut tape, &p);
        let fresh = if avail > cache.rows {
            let x = f.t.constant(&[n_frames, self.cfg.feat_dim], frames.prefix(n_frames).to_vec())?;
            let front = self.speech_front(&mut f, x)?;
            let rows = f.t.rows(front, cache.rows, avail)?;
            Some(f.add_positions(rows, cache.rows)?)
        } else {
            None
        };
        self.extend_cache(&mut f, cache, fresh, complete, &self.speech_layers())
    }

    /// Extends `cache` with the first `n_tokens` source tokens, plus the
    /// end row once the whole sentence has arrived.
    pub fn extend_text(&self, cache: &mut EncoderCache, tokens: &TokenSequence, n_tokens: usize) -> Result<()> {
        self.require_causal()?;
        let complete = n_tokens >= tokens.len() && !cache.closed;
        let seen = cache.rows - usize::from(cache.closed);
        if n_tokens <= seen && !complete {
            return Ok(());
        }
        self.check_tokens(&tokens.tokens[..n_tokens])?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut f = self.eval_fwd(&mut tape, &p);
        let fresh = if n_tokens > cache.rows {
            Some(self.embed_source(&mut f, &tokens.tokens[cache.rows..n_tokens], cache.rows)?)
        } else {
            None
        };
        self.extend_cache(&mut f, cache, fresh, complete, &self.text_layers())
    }

    /// Encodes a received prefix from scratch; the end row is added when
    /// the prefix is the whole utterance.
    pub fn encode_speech_prefix(&self, frames: &FrameSequence, n_frames: usize) -> Result<EncoderOutput> {
        self.encode_speech_eval(frames, n_frames.min(frames.len()))
    }

    pub fn encode_text_prefix(&self, tokens: &TokenSequence, n_tokens: usize) -> Result<EncoderOutput> {
        let n = n_tokens.min(tokens.len());
        self.encode_text_eval(&tokens.tokens[..n], n == tokens.len())
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use crate::tensor::Tensor;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            ffn_dim: 32,
            heads: 2,
            feat_dim: 4,
            ..Default::default()
        }
    }

    fn frames(t: usize, feat: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * feat).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FrameSequence::new(Tensor::new(vec![t, feat], data).unwrap()).unwrap()
    }

    #[test]
    fn text_shapes_and_vocab_errors() {
        let m = Model::new(small_cfg(), 1).unwrap();
        let out = m.encode_text(&TokenSequence::new(vec![3])).unwrap();
        assert_eq!(out.states.shape, vec![2, 16]);
        assert!(matches!(m.encode_text(&TokenSequence::new(vec![32])), Err(Error::Input(_))));
        assert!(matches!(m.encode_text(&TokenSequence::new(vec![])), Err(Error::Input(_))));
    }

    #[test]
    fn speech_lengths_follow_stride() {
        let m = Model::new(small_cfg(), 1).unwrap();
        assert_eq!(m.encode_speech(&frames(8, 4, 0)).unwrap().valid_len, 3);
        assert_eq!(m.encode_speech(&frames(9, 4, 0)).unwrap().valid_len, 4);
        let fr = frames(9, 4, 0);
        assert_eq!(m.encode_speech_prefix(&fr, 8).unwrap().valid_len, 2);
        let empty = FrameSequence::new(Tensor::zeros(&[0, 4])).unwrap();
        assert!(matches!(m.encode_speech(&empty), Err(Error::Input(_))));
    }

    #[test]
    fn causal_text_prefix_property() {
        let m = Model::new(small_cfg(), 2).unwrap();
        let toks = TokenSequence::new(vec![4, 9, 1, 30, 7]);
        let full = m.encode_text(&toks).unwrap();
        for j in 1..toks.len() {
            let prefix = m.encode_text_prefix(&toks, j).unwrap();
            assert_eq!(prefix.states.data, full.states.data[..j * 16].to_vec());
        }
    }

    #[test]
    fn incremental_speech_matches_full_bitwise() {
        let m = Model::new(small_cfg(), 3).unwrap();
        let fr = frames(23, 4, 5);
        let full = m.encode_speech(&fr).unwrap();
        let mut cache = m.new_encoder_cache(true);
        for n in [1, 2, 5, 6, 7, 13, 20, 23] {
            m.extend_speech(&mut cache, &fr, n).unwrap();
            assert_eq!(cache.rows, n.div_ceil(4) + usize::from(n == 23));
        }
        assert_eq!(cache.states, full.states.data);

        // the last frames add no position, only the end row
        let fr = frames(24, 4, 6);
        let full = m.encode_speech(&fr).unwrap();
        let mut cache = m.new_encoder_cache(true);
        for n in [21, 24, 24] {
            m.extend_speech(&mut cache, &fr, n).unwrap();
        }
        assert_eq!(cache.rows, 7);
        assert_eq!(cache.states, full.states.data);
    }

    #[test]
    fn incremental_text_matches_full_bitwise() {
        let m = Model::new(small_cfg(), 3).unwrap();
        let toks = TokenSequence::new(vec![1, 2, 3, 4, 5, 6, 7]);
        let full = m.encode_text(&toks).unwrap();
        let mut cache = m.new_encoder_cache(false);
        for n in [2, 3, 7, 7] {
            m.extend_text(&mut cache, &toks, n).unwrap();
        }
        assert_eq!(cache.rows, 8);
        assert_eq!(cache.states, full.states.data);
    }

    #[test]
    fn shared_layers_tie_both_branches() {
        let base = Model::new(small_cfg(), 4).unwrap();
        let toks = TokenSequence::new(vec![1, 5, 2]);
        let fr = frames(12, 4, 1);
        let text0 = base.encode_text(&toks).unwrap();
        let speech0 = base.encode_speech(&fr).unwrap();

        let mut shared = base.clone();
        shared.params.get_mut("shared.layer1.ffn.w1").unwrap().data[0] += 0.5;
        assert_ne!(shared.encode_text(&toks).unwrap().states, text0.states);
        assert_ne!(shared.encode_speech(&fr).unwrap().states, speech0.states);

        let mut private = base.clone();
        private.params.get_mut("speech.layer0.ffn.w1").unwrap().data[0] += 0.5;
        assert_eq!(private.encode_text(&toks).unwrap().states, text0.states);
        assert_ne!(private.encode_speech(&fr).unwrap().states, speech0.states);
    }

    #[test]
    fn bidirectional_encoder_refuses_incremental() {
        let cfg = ModelConfig {
            causal_encoder: false,
            ..small_cfg()
        };
        let m = Model::new(cfg, 0).unwrap();
        let mut cache = m.new_encoder_cache(false);
        let toks = TokenSequence::new(vec![1, 2]);
        assert!(matches!(m.extend_text(&mut cache, &toks, 1), Err(Error::Contract(_))));
        // re-encoding still works, and later tokens now influence earlier states
        let a = m.encode_text_prefix(&toks, 1).unwrap();
        let b = m.encode_text(&toks).unwrap();
        assert_ne!(a.states.data, b.states.data[..16].to_vec());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let m = Model::new(small_cfg(), 9).unwrap();
        let fr = frames(10, 4, 2);
        let a = m.encode_speech(&fr).unwrap();
        let b = m.encode_speech(&fr).unwrap();
        let bits = |o: &EncoderOutput| o.states.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
