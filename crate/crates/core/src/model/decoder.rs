use crate::error::{Error, Result};
use crate::policy::{advance_head, AlignmentMatrix, monotonic_context, monotonic_energy, selection_prob, Decider, EncoderSource};
use crate::tensor::{softmax_in_place, Tape, Tensor, Var};

use super::layers::{Fwd, KvCache};
use super::params::DecoderLayerIds;
use super::{EncoderOutput, Model, TokenSequence};

/// How the monotonic cross-attention forms its weights.
#[derive(Clone, Copy, Debug)]
pub enum Attention<'p> {
    /// Closed-form expectation over write decisions (training).
    Expected,
    /// Fixed attended positions, indexed `[layer·H + head][step]`.
    Hard(&'p [Vec<usize>]),
}

/// Tape handles produced by a teacher-forced decoder pass.
pub struct DecoderVars {
    pub logits: Var,
    /// Raw energies `[I×J]`, indexed `[layer][head]`.
    pub energies: Vec<Vec<Var>>,
    /// Expected alignments `[I×J]`; empty under hard attention.
    pub alphas: Vec<Vec<Var>>,
}

/// Incremental decoder state: self-attention caches and each head's
/// attended position.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub caches: Vec<KvCache>,
    pub positions: Vec<usize>,
    pub step: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    /// Attended position per `layer·H + head`.
    pub positions: Vec<usize>,
}

impl StepOutput {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

impl Model {
    fn embed_target(&self, f: &mut Fwd, tokens: &[usize], offset: usize) -> Result<Var> {
        let e = f.t.embedding(f.param(self.layout.target_embed), tokens)?;
        let e = f.t.scale(e, (self.cfg.embed_dim as f64).sqrt());
        f.add_positions(e, offset)
    }

    fn self_sublayer(&self, f: &mut Fwd, x: Var, ids: &DecoderLayerIds, cache: Option<&mut KvCache>) -> Result<Var> {
        let a = f.norm(x, ids.norm_self)?;
        let a = f.self_attention(a, ids.self_attn, cache, true)?;
        let a = f.dropout(a)?;
        f.t.add(x, a)
    }

    fn ffn_sublayer(&self, f: &mut Fwd, x: Var, ids: &DecoderLayerIds) -> Result<Var> {
        let h = f.norm(x, ids.norm_ffn)?;
        let h = f.ffn(h, ids.ffn)?;
        let h = f.dropout(h)?;
        f.t.add(x, h)
    }

    fn output(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let x = f.norm(x, self.layout.decoder_norm)?;
        f.linear(x, self.layout.out_weight, Some(self.layout.out_bias))
    }

    fn one_hot_rows(&self, t: &mut Tape, positions: &[usize], width: usize) -> Result<Var> {
        let mut data = vec![0.0; positions.len() * width];
        for (i, &j) in positions.iter().enumerate() {
            if j >= width {
                return Err(Error::Input(format!("attended position {j} beyond {width} encoder rows")));
            }
            data[i * width + j] = 1.0;
        }
        t.constant(&[positions.len(), width], data)
    }

    /// Teacher-forced decoder over `enc` (`[J×D]`). `inputs` is the
    /// BOS-prefixed target, so logits row `i` predicts target token `i`.
    pub(crate) fn decode_vars(&self, f: &mut Fwd, enc: Var, inputs: &[usize], attn: Attention) -> Result<DecoderVars> {
        let cfg = &self.cfg;
        if inputs.is_empty() {
            return Err(Error::Input("empty decoder input".into()));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= cfg.output_vocab()) {
            return Err(Error::Input(format!("target token {bad} out of vocabulary")));
        }
        let steps = inputs.len();
        let j_len = f.t.shape(enc)[0];
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let mut x = self.embed_target(f, inputs, 0)?;
        let mut energies = Vec::new();
        let mut alphas = Vec::new();
        for (l, ids) in self.layout.decoder_layers.iter().enumerate() {
            x = self.self_sublayer(f, x, ids, None)?;
            let m = f.norm(x, ids.norm_mono)?;
            let q = f.linear(m, ids.mono.wq, None)?;
            let k = f.linear(enc, ids.mono.wk, None)?;
            let v = f.linear(enc, ids.mono.wv, None)?;
            let bias = f.param(ids.energy_bias);
            let mut layer_e = Vec::with_capacity(heads);
            let mut layer_a = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = f.t.cols(q, h * dh, (h + 1) * dh)?;
                let kh = f.t.cols(k, h * dh, (h + 1) * dh)?;
                let bh = f.t.select(bias, h)?;
                let e = monotonic_energy(f.t, qh, kh, bh)?;
                layer_e.push(e);
                let a = match attn {
                    Attention::Expected => {
                        let noisy = f.energy_noise(e)?;
                        let p = selection_prob(f.t, noisy, true);
                        f.t.monotonic_alignment(p)?
                    }
                    Attention::Hard(pos) => {
                        let row = pos
                            .get(l * heads + h)
                            .filter(|r| r.len() >= steps)
                            .ok_or_else(|| Error::Input("hard positions do not cover every head and step".into()))?;
                        self.one_hot_rows(f.t, &row[..steps], j_len)?
                    }
                };
                layer_a.push(a);
            }
            let c = monotonic_context(f.t, &layer_a, v, f.param(ids.mono.wo))?;
            let c = f.dropout(c)?;
            x = f.t.add(x, c)?;
            x = self.ffn_sublayer(f, x, ids)?;
            energies.push(layer_e);
            if matches!(attn, Attention::Expected) {
                alphas.push(layer_a);
            }
        }
        let logits = self.output(f, x)?;
        Ok(DecoderVars {
            logits,
            energies,
            alphas,
        })
    }

    /// BOS-prefixed decoder input for a target sequence (EOS is only a
    /// prediction target).
    pub fn decoder_inputs(&self, target: &TokenSequence) -> Vec<usize> {
        std::iter::once(self.cfg.bos()).chain(target.tokens.iter().copied()).collect()
    }

    /// Target sequence followed by EOS.
    pub fn decoder_targets(&self, target: &TokenSequence) -> Vec<usize> {
        target.tokens.iter().copied().chain(std::iter::once(self.cfg.eos())).collect()
    }

    /// Eval-mode teacher-forced logits `[(|y|+1) × V]`.
    pub fn teacher_forced_logits(&self, enc: &EncoderOutput, target: &TokenSequence, attn: Attention) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut f = Fwd {
            t: &mut tape,
            p: &p,
            noise: None,
            heads: self.cfg.heads,
        };
        let d = enc.states.cols();
        let e = f.t.constant(&[enc.valid_len, d], enc.valid_data().to_vec())?;
        let out = self.decode_vars(&mut f, e, &self.decoder_inputs(target), attn)?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Eval-mode expected alignments of every decoder layer, teacher-forced
    /// on `target` (heads of one layer stacked in one matrix).
    pub fn expected_alignments(&self, enc: &EncoderOutput, target: &TokenSequence) -> Result<Vec<AlignmentMatrix>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut f = Fwd {
            t: &mut tape,
            p: &p,
            noise: None,
            heads: self.cfg.heads,
        };
        let d = enc.states.cols();
        let e = f.t.constant(&[enc.valid_len, d], enc.valid_data().to_vec())?;
        let out = self.decode_vars(&mut f, e, &self.decoder_inputs(target), Attention::Expected)?;
        out.alphas
            .iter()
            .map(|layer| {
                let steps = tape.shape(layer[0])[0];
                let alpha: Vec<f64> = layer.iter().flat_map(|&a| tape.value(a).to_vec()).collect();
                Ok(AlignmentMatrix {
                    heads: layer.len(),
                    steps,
                    positions: enc.valid_len,
                    alpha,
                })
            })
            .collect()
    }

    pub fn start_decoder(&self, max_len: usize) -> DecoderState {
        DecoderState {
            caches: vec![KvCache::default(); self.cfg.decoder_layers],
            positions: vec![0; self.cfg.monotonic_heads()],
            step: 0,
            max_len,
        }
    }

    /// Write probability of head `h` of layer `ids` at encoder row `row`.
    fn write_prob(&self, ids: &DecoderLayerIds, q: &[f64], h: usize, row: &[f64]) -> f64 {
        let d = self.cfg.embed_dim;
        let dh = self.cfg.head_dim();
        let wk = &self.params.tensors()[ids.mono.wk].data;
        let bias = self.params.tensors()[ids.energy_bias].data[h];
        let mut dot = 0.0;
        for c in h * dh..(h + 1) * dh {
            let mut k = 0.0;
            for (r, &x) in row.iter().enumerate() {
                k += x * wk[r * d + c];
            }
            dot += q[c] * k;
        }
        let e = dot / (dh as f64).sqrt() + bias;
        1.0 / (1.0 + (-e).exp())
    }

    /// One incremental decoder step. `prev` is the previous output token
    /// (BOS at step 0). Heads advance layer by layer, reading from
    /// `source` as needed; the next-token distribution is computed once
    /// every head has committed.
    pub fn decode_step(
        &self,
        state: &mut DecoderState,
        prev: usize,
        source: &mut dyn EncoderSource,
        decider: &mut Decider,
    ) -> Result<StepOutput> {
        if state.step >= state.max_len {
            return Err(Error::Contract(format!(
                "decoder prefix already at maximum length {}",
                state.max_len
            )));
        }
        if prev >= self.cfg.output_vocab() {
            return Err(Error::Input(format!("target token {prev} out of vocabulary")));
        }
        let heads = self.cfg.heads;
        let d = self.cfg.embed_dim;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut f = Fwd {
            t: &mut tape,
            p: &p,
            noise: None,
            heads,
        };
        let mut x = self.embed_target(&mut f, &[prev], state.step)?;
        for (l, ids) in self.layout.decoder_layers.iter().enumerate() {
            x = self.self_sublayer(&mut f, x, ids, Some(&mut state.caches[l]))?;
            let m = f.norm(x, ids.norm_mono)?;
            let q = f.linear(m, ids.mono.wq, None)?;
            let qv = f.t.value(q).to_vec();
            for h in 0..heads {
                let slot = l * heads + h;
                let start = state.positions[slot];
                state.positions[slot] = advance_head(start, source, decider, |states, j| {
                    self.write_prob(ids, &qv, h, &states[j * d..(j + 1) * d])
                })?;
            }
            let avail = source.available();
            let enc = f.t.constant(&[avail, d], source.states()[..avail * d].to_vec())?;
            let v = f.linear(enc, ids.mono.wv, None)?;
            let alphas = (0..heads)
                .map(|h| self.one_hot_rows(f.t, &[state.positions[l * heads + h]], avail))
                .collect::<Result<Vec<_>>>()?;
            let c = monotonic_context(f.t, &alphas, v, f.param(ids.mono.wo))?;
            x = f.t.add(x, c)?;
            x = self.ffn_sublayer(&mut f, x, ids)?;
        }
        let logits = self.output(&mut f, x)?;
        let mut probs = tape.value(logits).to_vec();
        softmax_in_place(&mut probs);
        state.step += 1;
        Ok(StepOutput {
            probs,
            positions: state.positions.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{FrameSequence, ModelConfig};
    use super::*;
    use crate::policy::{FixedSource, PolicyConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            ffn_dim: 32,
            heads: 2,
            feat_dim: 4,
            vocab_src: 10,
            vocab_tgt: 10,
            ..Default::default()
        }
    }

    fn random_enc(rows: usize, d: usize, seed: u64) -> EncoderOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        EncoderOutput {
            states: Tensor::new(vec![rows, d], data).unwrap(),
            valid_len: rows,
        }
    }

    #[test]
    fn empty_prefix_gives_distribution() {
        let m = Model::new(small_cfg(), 0).unwrap();
        let enc = random_enc(3, 16, 1);
        let mut st = m.start_decoder(4);
        let mut src = FixedSource::new(&enc, 1);
        let mut dec = Decider::new(&PolicyConfig::default()).unwrap();
        let out = m.decode_step(&mut st, m.cfg.bos(), &mut src, &mut dec).unwrap();
        assert_eq!(out.probs.len(), 12);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn step_beyond_cap_is_contract_error() {
        let m = Model::new(small_cfg(), 0).unwrap();
        let enc = random_enc(3, 16, 1);
        let mut st = m.start_decoder(1);
        let mut src = FixedSource::new(&enc, 1);
        let mut dec = Decider::new(&PolicyConfig::default()).unwrap();
        m.decode_step(&mut st, m.cfg.bos(), &mut src, &mut dec).unwrap();
        assert!(matches!(
            m.decode_step(&mut st, 0, &mut src, &mut dec),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn incremental_matches_teacher_forced_hard_path() {
        let m = Model::new(small_cfg(), 5).unwrap();
        let enc = random_enc(6, 16, 2);
        let target = TokenSequence::new(vec![3, 1, 4, 1]);
        let inputs = m.decoder_inputs(&target);
        let mut st = m.start_decoder(10);
        let mut src = FixedSource::new(&enc, 1);
        let mut dec = Decider::new(&PolicyConfig::default()).unwrap();
        let mut rows = Vec::new();
        let mut pos = vec![Vec::new(); m.cfg.monotonic_heads()];
        for &tok in &inputs {
            let out = m.decode_step(&mut st, tok, &mut src, &mut dec).unwrap();
            for (slot, &j) in out.positions.iter().enumerate() {
                pos[slot].push(j);
            }
            rows.push(out.probs);
        }
        let logits = m.teacher_forced_logits(&enc, &target, Attention::Hard(&pos)).unwrap();
        let v = logits.cols();
        for (i, row) in rows.iter().enumerate() {
            let mut p = logits.data[i * v..(i + 1) * v].to_vec();
            softmax_in_place(&mut p);
            for (a, b) in p.iter().zip(row) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn hard_decode_ignores_rows_past_attended_position() {
        let m = Model::new(small_cfg(), 5).unwrap();
        let enc = random_enc(6, 16, 2);
        let target = TokenSequence::new(vec![2, 2]);
        let pos = vec![vec![0, 1, 2]; m.cfg.monotonic_heads()];
        let base = m.teacher_forced_logits(&enc, &target, Attention::Hard(&pos)).unwrap();
        let mut changed = enc.clone();
        for x in &mut changed.states.data[3 * 16..] {
            *x += 7.0;
        }
        let other = m.teacher_forced_logits(&changed, &target, Attention::Hard(&pos)).unwrap();
        assert_eq!(base.data, other.data);
    }

    #[test]
    fn causal_in_target_tokens() {
        let m = Model::new(small_cfg(), 6).unwrap();
        let enc = random_enc(4, 16, 3);
        let a = m.teacher_forced_logits(&enc, &TokenSequence::new(vec![1, 2, 3]), Attention::Expected).unwrap();
        let b = m.teacher_forced_logits(&enc, &TokenSequence::new(vec![1, 2, 9]), Attention::Expected).unwrap();
        let v = a.cols();
        assert_eq!(a.data[..3 * v], b.data[..3 * v]);
        assert_ne!(a.data[3 * v..], b.data[3 * v..]);
    }

    #[test]
    fn inference_probs_match_training_energies() {
        let m = Model::new(small_cfg(), 8).unwrap();
        let enc = random_enc(5, 16, 4);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let mut f = Fwd {
            t: &mut tape,
            p: &p,
            noise: None,
            heads: 2,
        };
        let e = f.t.constant(&[5, 16], enc.states.data.clone()).unwrap();
        let vars = m.decode_vars(&mut f, e, &[m.cfg.bos()], Attention::Expected).unwrap();
        let e00 = tape.value(vars.energies[0][1]).to_vec();

        // Layer-0 queries do not depend on the cross-attention, so the
        // first decoder step's write probabilities are comparable.
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let mut f = Fwd {
            t: &mut tape,
            p: &p,
            noise: None,
            heads: 2,
        };
        let ids = &m.layout.decoder_layers[0];
        let x = m.embed_target(&mut f, &[m.cfg.bos()], 0).unwrap();
        let x = m.self_sublayer(&mut f, x, ids, None).unwrap();
        let x = f.norm(x, ids.norm_mono).unwrap();
        let q = f.linear(x, ids.mono.wq, None).unwrap();
        let q = tape.value(q).to_vec();
        for (j, &ej) in e00.iter().enumerate() {
            let pj = m.write_prob(ids, &q, 1, enc.row(j));
            assert!((pj - 1.0 / (1.0 + (-ej).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn speech_and_text_share_decoder() {
        let m = Model::new(small_cfg(), 1).unwrap();
        let n_dec = m.params.names().iter().filter(|n| n.starts_with("decoder.")).count();
        assert!(n_dec > 0);
        let fr = FrameSequence::new(Tensor::full(&[8, 4], 0.3)).unwrap();
        let se = m.encode_speech(&fr).unwrap();
        let te = m.encode_text(&TokenSequence::new(vec![1, 2])).unwrap();
        assert_eq!(se.states.cols(), te.states.cols());
    }
}
