//! Self-checks behind the `grad-check` and `oracle-check` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::latency::dal_loss;
use crate::model::{Attention, FrameSequence, Fwd, Model, ModelConfig, TokenSequence};
use crate::regularizers::{car_loss, dar_loss, kd_loss};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{joint_loss, LossWeights, PairedExample, TermMask};

pub const LOSS_TERMS: [&str; 6] = ["st_nll", "kd", "car", "mt_nll", "dar", "dal"];

/// Gradients below this size are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_src: 6,
        vocab_tgt: 6,
        feat_dim: 4,
        embed_dim: 8,
        ffn_dim: 16,
        heads: 2,
        private_speech_layers: 1,
        shared_encoder_layers: 1,
        decoder_layers: 1,
        dropout: 0.0,
        energy_init_bias: 0.0,
        ..Default::default()
    }
}

/// Three source tokens as 12 frames (3 encoder states) and a
/// three-token target (4 decoder steps).
pub fn toy_example(cfg: &ModelConfig, seed: u64) -> Result<PairedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<f64> = (0..12 * cfg.feat_dim).map(|_| rng.sample(StandardNormal)).collect();
    let transcript: Vec<usize> = (0..3).map(|_| rng.gen_range(0..cfg.vocab_src)).collect();
    let target: Vec<usize> = (0..3).map(|_| rng.gen_range(0..cfg.vocab_tgt)).collect();
    Ok(PairedExample {
        frames: FrameSequence::new(Tensor::new(vec![12, cfg.feat_dim], frames)?)?,
        transcript: TokenSequence::new(transcript),
        target: TokenSequence::new(target),
        token_frames: vec![4, 4, 4],
    })
}

fn check_weights() -> LossWeights {
    LossWeights::full().with_lambda(0.1)
}

/// Unweighted values of the six loss terms, in [`LOSS_TERMS`] order.
pub fn term_values(model: &Model, ex: &PairedExample) -> Result<[f64; 6]> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let mut f = Fwd {
        t: &mut tape,
        p: &p,
        noise: None,
        heads: model.cfg.heads,
    };
    let jl = joint_loss(&mut f, model, ex, &check_weights(), TermMask { all: true })?;
    let mut out = [0.0; 6];
    for (name, v) in jl.parts {
        let k = LOSS_TERMS.iter().position(|&n| n == name).expect("known term");
        out[k] = tape.item(v);
    }
    Ok(out)
}

/// Term values with every stop-gradient input (text logits, text encoder
/// states, text energies) taken from `teacher` instead of `model`. With
/// `teacher == model` this equals [`term_values`]; perturbing `model` alone
/// gives the function whose gradient the tape computes.
pub fn frozen_term_values(model: &Model, teacher: &Model, ex: &PairedExample) -> Result<[f64; 6]> {
    let inputs = model.decoder_inputs(&ex.target);
    let targets = model.decoder_targets(&ex.target);
    let smoothing = model.cfg.label_smoothing;

    let (t_logits, t_states, t_energies) = {
        let mut tape = Tape::new();
        let p = teacher.bind(&mut tape);
        let mut f = Fwd {
            t: &mut tape,
            p: &p,
            noise: None,
            heads: teacher.cfg.heads,
        };
        let ht = teacher.encode_text_vars(&mut f, &ex.transcript.tokens)?;
        let text = teacher.decode_vars(&mut f, ht, &inputs, Attention::Expected)?;
        let energies: Vec<Vec<Tensor>> = text
            .energies
            .iter()
            .map(|l| l.iter().map(|&e| tape.to_tensor(e)).collect())
            .collect();
        (tape.to_tensor(text.logits), tape.to_tensor(ht), energies)
    };

    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let mut f = Fwd {
        t: &mut tape,
        p: &p,
        noise: None,
        heads: model.cfg.heads,
    };
    let frames = f.t.leaf(&ex.frames.frames);
    let hs = model.encode_speech_vars(&mut f, frames)?;
    let speech = model.decode_vars(&mut f, hs, &inputs, Attention::Expected)?;
    let ht = model.encode_text_vars(&mut f, &ex.transcript.tokens)?;
    let text = model.decode_vars(&mut f, ht, &inputs, Attention::Expected)?;
    let t = f.t;
    let st = t.cross_entropy(speech.logits, &targets, smoothing)?;
    let tl = t.leaf(&t_logits);
    let kd = kd_loss(t, speech.logits, tl)?;
    let ts = t.leaf(&t_states);
    let car = car_loss(t, hs, ts)?;
    let mt = t.cross_entropy(text.logits, &targets, smoothing)?;
    let te: Vec<Vec<Var>> = t_energies.iter().map(|l| l.iter().map(|e| t.leaf(e)).collect()).collect();
    let k = t.shape(hs)[0];
    let l = t_states.rows();
    let dar = dar_loss(t, &speech.energies, &te, k, l)?;
    let alphas: Vec<Var> = speech.alphas.iter().flatten().copied().collect();
    let dal = dal_loss(t, &alphas, k, inputs.len())?;
    Ok([st, kd, car, mt, dar, dal].map(|v| t.item(v)))
}

/// Flat parameter gradient of each term separately, in [`LOSS_TERMS`] order.
pub fn term_gradients(model: &Model, ex: &PairedExample) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let mut f = Fwd {
        t: &mut tape,
        p: &p,
        noise: None,
        heads: model.cfg.heads,
    };
    let jl = joint_loss(&mut f, model, ex, &check_weights(), TermMask { all: true })?;
    let mut offsets = Vec::new();
    let mut acc = 0;
    for t in model.params.tensors() {
        offsets.push(acc);
        acc += t.numel();
    }
    let mut out = vec![Vec::new(); 6];
    for (name, v) in jl.parts {
        tape.reset_grads();
        tape.backward(v)?;
        let mut g = vec![0.0; acc];
        for (id, grad) in tape.param_grads() {
            g[offsets[id]..offsets[id] + grad.len()].copy_from_slice(grad);
        }
        let k = LOSS_TERMS.iter().position(|&n| n == name).expect("known term");
        out[k] = g;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TermGradCheck {
    pub term: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter holding the worst relative error.
    pub worst_param: String,
}

/// Central differences with step `h` over every parameter element of
/// `model`, for each loss term. Relative error is
/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn loss_gradient_check(model: &mut Model, ex: &PairedExample, h: f64) -> Result<Vec<TermGradCheck>> {
    let analytic = term_gradients(model, ex)?;
    let mut reports: Vec<TermGradCheck> = LOSS_TERMS
        .iter()
        .map(|t| TermGradCheck {
            term: t.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_param: String::new(),
        })
        .collect();
    let names = model.params.names().to_vec();
    let teacher = model.clone();
    let mut flat = 0;
    for (id, name) in names.iter().enumerate() {
        let n = model.params.tensors()[id].numel();
        for e in 0..n {
            let x = model.params.tensors()[id].data[e];
            model.params.tensors_mut()[id].data[e] = x + h;
            let up = frozen_term_values(model, &teacher, ex)?;
            model.params.tensors_mut()[id].data[e] = x - h;
            let down = frozen_term_values(model, &teacher, ex)?;
            model.params.tensors_mut()[id].data[e] = x;
            for (k, r) in reports.iter_mut().enumerate() {
                let num = (up[k] - down[k]) / (2.0 * h);
                let a = analytic[k][flat + e];
                let abs = (a - num).abs();
                let rel = abs / a.abs().max(num.abs()).max(REL_ERR_FLOOR);
                r.checked += 1;
                r.max_abs_err = r.max_abs_err.max(abs);
                if rel > r.max_rel_err {
                    r.max_rel_err = rel;
                    r.worst_param = format!("{name}[{e}]");
                }
            }
        }
        flat += n;
    }
    Ok(reports)
}

/// The gradient suite on a freshly initialized toy model.
pub fn grad_check(seed: u64) -> Result<Vec<TermGradCheck>> {
    let cfg = toy_config();
    let mut model = Model::new(cfg.clone(), seed)?;
    let ex = toy_example(&cfg, seed)?;
    loss_gradient_check(&mut model, &ex, 1e-5)
}

/// α of one head by walking every Bernoulli read/write path.
pub fn brute_force_alignment(p: &[f64], i_len: usize, j_len: usize) -> Vec<f64> {
    fn walk(p: &[f64], j_len: usize, i_len: usize, i: usize, start: usize, mass: f64, out: &mut [f64]) {
        if i == i_len {
            return;
        }
        let mut stay = mass;
        for j in start..j_len {
            let w = stay * p[i * j_len + j];
            out[i * j_len + j] += w;
            walk(p, j_len, i_len, i + 1, j, w, out);
            stay *= 1.0 - p[i * j_len + j];
        }
    }
    let mut out = vec![0.0; i_len * j_len];
    walk(p, j_len, i_len, 0, 0, 1.0, &mut out);
    out
}

/// Max abs difference between the fused expected alignment and path
/// enumeration over all `I, J ≤ 5`, `H ≤ 2`, with `draws` random
/// probability tensors per shape.
pub fn alignment_oracle_check(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i_len in 1..=5 {
        for j_len in 1..=5 {
            for heads in 1..=2 {
                for _ in 0..draws {
                    for _ in 0..heads {
                        let p: Vec<f64> = (0..i_len * j_len).map(|_| rng.gen::<f64>()).collect();
                        let mut t = Tape::new();
                        let v = t.constant(&[i_len, j_len], p.clone())?;
                        let a = t.monotonic_alignment(v)?;
                        let oracle = brute_force_alignment(&p, i_len, j_len);
                        for (x, y) in t.value(a).iter().zip(&oracle) {
                            worst = worst.max((x - y).abs());
                        }
                    }
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_hand_case() {
        // one step, two positions: write at 0 w.p. p0, else at 1 w.p. (1−p0)p1
        let a = brute_force_alignment(&[0.25, 0.5], 1, 2);
        assert_eq!(a, vec![0.25, 0.375]);
    }

    #[test]
    fn oracle_agrees_on_a_few_draws() {
        assert!(alignment_oracle_check(3, 1).unwrap() < 1e-12);
    }

    #[test]
    fn frozen_values_match_joint_loss() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone(), 2).unwrap();
        let ex = toy_example(&cfg, 2).unwrap();
        assert_eq!(frozen_term_values(&m, &m, &ex).unwrap(), term_values(&m, &ex).unwrap());
    }

    #[test]
    fn term_values_are_finite() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone(), 1).unwrap();
        let ex = toy_example(&cfg, 1).unwrap();
        let v = term_values(&m, &ex).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[0] > 0.0 && v[5] > 0.0);
    }
}
