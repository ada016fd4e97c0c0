//! WebAssembly bindings for the static page in `www/`.

use dar_core::latency::{average_lagging, dal_metric, DelayVector};
use dar_core::policy::AlignmentMatrix;
use dar_core::regularizers::{cosine_similarity, dar_loss};
use dar_core::tensor::Tape;
use wasm_bindgen::prelude::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Write probabilities `σ(sharpness·(j − lag − i·rate))` for `steps`
/// decoder steps over `positions` encoder states.
pub fn write_probs(steps: usize, positions: usize, lag: f64, rate: f64, sharpness: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(steps * positions);
    for i in 0..steps {
        for j in 0..positions {
            p.push(sigmoid(sharpness * (j as f64 - lag - i as f64 * rate)));
        }
    }
    p
}

/// Expected alignment `[steps × positions]` followed by each row's
/// residual mass.
pub fn alignment(steps: usize, positions: usize, lag: f64, rate: f64, sharpness: f64) -> Result<Vec<f64>, String> {
    if steps == 0 || positions == 0 || steps * positions > 4096 {
        return Err("grid must be non-empty and at most 4096 cells".into());
    }
    let p = write_probs(steps, positions, lag, rate, sharpness);
    let a = AlignmentMatrix::from_probs(&p, 1, steps, positions).map_err(|e| e.to_string())?;
    let mut out = a.alpha.clone();
    out.extend((0..steps).map(|i| a.residual(0, i)));
    Ok(out)
}

/// `[AL, DAL]` of comma- or space-separated delays.
pub fn latency(delays: &str, src_len: f64) -> Result<Vec<f64>, String> {
    let d = delays
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect::<Result<Vec<_>, _>>()?;
    let d = DelayVector::new(d, src_len).map_err(|e| e.to_string())?;
    Ok(vec![average_lagging(&d), dal_metric(&d)])
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Text energies `[steps × text_len]` and speech energies that repeat each
/// text column `repeat` times plus uniform noise of size `noise`. Returns
/// the DAR loss followed by the cosine similarity matrix
/// `[(text_len·repeat) × text_len]`.
pub fn dar_demo(steps: usize, text_len: usize, repeat: usize, noise: f64, seed: u64) -> Result<Vec<f64>, String> {
    if steps == 0 || text_len == 0 || repeat == 0 || steps * text_len * repeat > 4096 {
        return Err("sizes must be positive and small".into());
    }
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let text: Vec<f64> = (0..steps * text_len).map(|_| 3.0 * lcg(&mut state)).collect();
    let k = text_len * repeat;
    let mut speech = Vec::with_capacity(steps * k);
    for i in 0..steps {
        for j in 0..k {
            speech.push(text[i * text_len + j / repeat] + noise * lcg(&mut state));
        }
    }
    let mut t = Tape::new();
    let s = t.input(&[steps, k], speech, true).map_err(|e| e.to_string())?;
    let x = t.input(&[steps, text_len], text, true).map_err(|e| e.to_string())?;
    let loss = dar_loss(&mut t, &[vec![s]], &[vec![x]], k, text_len).map_err(|e| e.to_string())?;
    let sim = cosine_similarity(&mut t, s, x).map_err(|e| e.to_string())?;
    let mut out = vec![t.item(loss)];
    out.extend_from_slice(t.value(sim));
    Ok(out)
}

#[wasm_bindgen(js_name = alignment)]
pub fn alignment_js(steps: usize, positions: usize, lag: f64, rate: f64, sharpness: f64) -> Result<Vec<f64>, JsValue> {
    alignment(steps, positions, lag, rate, sharpness).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = latency)]
pub fn latency_js(delays: &str, src_len: f64) -> Result<Vec<f64>, JsValue> {
    latency(delays, src_len).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = darDemo)]
pub fn dar_demo_js(steps: usize, text_len: usize, repeat: usize, noise: f64, seed: u32) -> Result<Vec<f64>, JsValue> {
    dar_demo(steps, text_len, repeat, noise, seed as u64).map_err(|e| JsValue::from_str(&e))
}
