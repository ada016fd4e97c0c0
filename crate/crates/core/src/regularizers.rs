//! Cross-branch losses tying the speech branch to the text branch: decision
//! attentive regularization over monotonic energies, cross-attentive
//! regularization over encoder states, and token-level online distillation.
//! The text side is always detached.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Norm floor used by [`cosine_similarity`].
pub const NORM_FLOOR: f64 = 1e-8;

/// Energy columns stacked across heads: `[I × (N·H)]`, column `n·H + h`
/// holding head `h`'s energies for encoder position `n` over all decoder
/// steps.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStack {
    pub var: Var,
    pub positions: usize,
    pub heads: usize,
}

/// Stacks per-head energies `e_h[I×J]`, keeping the first `valid_len`
/// positions.
pub fn build_attention_stack(t: &mut Tape, energies: &[Var], valid_len: usize) -> Result<AttentionStack> {
    let heads = energies.len();
    if heads == 0 {
        return Err(Error::Input("no heads to stack".into()));
    }
    let shape = t.shape(energies[0]).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("attention_stack", &shape, &[2]));
    }
    if valid_len > shape[1] || valid_len == 0 {
        return Err(Error::Input(format!(
            "valid length {valid_len} outside 1..={} encoder positions",
            shape[1]
        )));
    }
    let mut parts = Vec::with_capacity(heads);
    for &e in energies {
        if t.shape(e) != shape.as_slice() {
            return Err(Error::shape("attention_stack", &shape, t.shape(e)));
        }
        parts.push(if valid_len == shape[1] { e } else { t.cols(e, 0, valid_len)? });
    }
    if heads == 1 {
        return Ok(AttentionStack {
            var: parts[0],
            positions: valid_len,
            heads,
        });
    }
    // head-major concatenation, then regroup columns by position
    let head_major = t.concat_cols(&parts)?;
    let width = valid_len * heads;
    let mut perm = vec![0.0; width * width];
    for h in 0..heads {
        for n in 0..valid_len {
            perm[(h * valid_len + n) * width + n * heads + h] = 1.0;
        }
    }
    let perm = t.constant(&[width, width], perm)?;
    Ok(AttentionStack {
        var: t.matmul(head_major, perm)?,
        positions: valid_len,
        heads,
    })
}

fn normalize_columns(t: &mut Tape, a: Var) -> Result<Var> {
    let sq = t.mul(a, a)?;
    let ss = t.sum_axis(sq, 0)?;
    let n = t.shape(ss)[0];
    let floor = t.constant(&[n], vec![NORM_FLOOR * NORM_FLOOR; n])?;
    let ss = t.maximum(ss, floor)?;
    let norm = t.sqrt(ss)?;
    let ones = t.constant(&[n], vec![1.0; n])?;
    let inv = t.div(ones, norm)?;
    t.scale_cols(a, inv)
}

/// Column-wise cosine similarities `S[(K·H) × (L·H)]` between two matrices
/// sharing their row count.
pub fn cosine_similarity(t: &mut Tape, source: Var, target: Var) -> Result<Var> {
    if t.shape(source).len() != 2 || t.shape(source)[0] != t.shape(target)[0] {
        return Err(Error::shape("cosine_similarity", t.shape(source), t.shape(target)));
    }
    let ns = normalize_columns(t, source)?;
    let nt = normalize_columns(t, target)?;
    let nst = t.transpose(ns)?;
    t.matmul(nst, nt)
}

/// `source · softmax(S)` with the softmax over `S`'s first axis, so every
/// output column is a convex combination of source columns.
pub fn reconstruct(t: &mut Tape, source: Var, sim: Var) -> Result<Var> {
    let w = t.softmax(sim, 0)?;
    t.matmul(source, w)
}

/// `‖src→tgt − sg[tgt→tgt]‖₂ / scale` for column matrices sharing rows.
fn reconstruction_gap(t: &mut Tape, source: Var, target: Var, scale: f64) -> Result<Var> {
    let target = t.detach(target);
    let s_st = cosine_similarity(t, source, target)?;
    let a_st = reconstruct(t, source, s_st)?;
    let s_tt = cosine_similarity(t, target, target)?;
    let a_tt = reconstruct(t, target, s_tt)?;
    let diff = t.sub(a_st, a_tt)?;
    let norm = t.l2_norm(diff);
    Ok(t.scale(norm, 1.0 / scale))
}

/// DAR loss from raw monotonic energies indexed `[layer][head]`, each
/// `[I×K]` (speech) or `[I×L]` (text), averaged over layers.
pub fn dar_loss(
    t: &mut Tape,
    speech: &[Vec<Var>],
    text: &[Vec<Var>],
    speech_len: usize,
    text_len: usize,
) -> Result<Var> {
    if speech.len() != text.len() || speech.is_empty() {
        return Err(Error::Input(format!(
            "layer count mismatch: {} speech vs {} text",
            speech.len(),
            text.len()
        )));
    }
    let mut total = None;
    for (es, et) in speech.iter().zip(text) {
        if es.len() != et.len() {
            return Err(Error::Input("head count mismatch".into()));
        }
        if t.shape(es[0])[0] != t.shape(et[0])[0] {
            return Err(Error::shape("dar_loss", t.shape(es[0]), t.shape(et[0])));
        }
        let a_s = build_attention_stack(t, es, speech_len)?;
        let a_t = build_attention_stack(t, et, text_len)?;
        let scale = (text_len * a_t.heads) as f64;
        let layer = reconstruction_gap(t, a_s.var, a_t.var, scale)?;
        total = Some(match total {
            None => layer,
            Some(acc) => t.add(acc, layer)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok(t.scale(total, 1.0 / speech.len() as f64))
}

/// CAR loss on encoder states `[K×D]` (speech) and `[L×D]` (text), with
/// positions as columns.
pub fn car_loss(t: &mut Tape, speech_states: Var, text_states: Var) -> Result<Var> {
    if t.shape(speech_states)[1] != t.shape(text_states)[1] {
        return Err(Error::shape("car_loss", t.shape(speech_states), t.shape(text_states)));
    }
    let text_len = t.shape(text_states)[0] as f64;
    let hs = t.transpose(speech_states)?;
    let ht = t.transpose(text_states)?;
    reconstruction_gap(t, hs, ht, text_len)
}

/// Token-level distillation: mean over positions of the cross-entropy from
/// the detached teacher distribution to the student.
pub fn kd_loss(t: &mut Tape, student_logits: Var, teacher_logits: Var) -> Result<Var> {
    if t.shape(student_logits) != t.shape(teacher_logits) || t.shape(student_logits).len() != 2 {
        return Err(Error::shape("kd_loss", t.shape(student_logits), t.shape(teacher_logits)));
    }
    let rows = t.shape(student_logits)[0];
    let teacher = t.detach(teacher_logits);
    let q = t.softmax(teacher, 1)?;
    let logp = t.log_softmax(student_logits)?;
    let prod = t.mul(q, logp)?;
    let s = t.sum(prod);
    Ok(t.scale(s, -1.0 / rows as f64))
}
