//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use dar_core::harness::CurvePoint;

pub type Energies = Vec<Vec<Vec<f64>>>; // [layer][head] row-major I×N

/// Columns `n·H + h` of the stacked energies, each a vector over steps.
fn stack(heads: &[Vec<f64>], steps: usize, n: usize) -> Vec<Vec<f64>> {
    let h_count = heads.len();
    let mut cols = vec![vec![0.0; steps]; n * h_count];
    for (h, e) in heads.iter().enumerate() {
        for i in 0..steps {
            for j in 0..n {
                cols[j * h_count + h][i] = e[i * n + j];
            }
        }
    }
    cols
}

fn unit(c: &[f64]) -> Vec<f64> {
    let norm = c.iter().map(|x| x * x).sum::<f64>().max(1e-16).sqrt();
    c.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Columns of `source` mixed by a softmax over source columns of their
/// cosine similarity to each target column.
fn rebuild(source: &[Vec<f64>], target: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let us: Vec<Vec<f64>> = source.iter().map(|c| unit(c)).collect();
    target
        .iter()
        .map(|tc| {
            let ut = unit(tc);
            let s: Vec<f64> = us.iter().map(|u| dot(u, &ut)).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut out = vec![0.0; tc.len()];
            for (col, wk) in source.iter().zip(&w) {
                for (o, x) in out.iter_mut().zip(col) {
                    *o += x * wk / z;
                }
            }
            out
        })
        .collect()
}

pub fn reference(speech: &Energies, text: &Energies, steps: usize, k: usize, l: usize) -> f64 {
    let mut total = 0.0;
    for (es, et) in speech.iter().zip(text) {
        let a_s = stack(es, steps, k);
        let a_t = stack(et, steps, l);
        let st = rebuild(&a_s, &a_t);
        let tt = rebuild(&a_t, &a_t);
        let sq: f64 = st.iter().flatten().zip(tt.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum();
        total += sq.sqrt() / (l * et.len()) as f64;
    }
    total / speech.len() as f64
}


/// Published (baseline BLEU, baseline AL, treatment BLEU, treatment AL).
pub const TABLE: [(f64, f64, f64, f64); 10] = [
    (6.5, 775.0, 7.9, 765.0),
    (10.08, 1220.0, 11.40, 1089.0),
    (11.72, 1683.0, 16.13, 1504.0),
    (13.33, 1841.0, 17.24, 1781.0),
    (12.92, 1891.0, 18.32, 1794.0),
    (12.95, 1935.0, 19.23, 1902.0),
    (14.24, 2183.0, 19.39, 2113.0),
    (13.98, 2376.0, 19.97, 2357.0),
    (13.85, 2484.0, 20.23, 2482.0),
    (16.18, 3079.0, 20.97, 2614.0),
];

pub fn point(model: &str, al: f64, bleu: f64) -> CurvePoint {
    CurvePoint {
        model: model.into(),
        lambda: 0.0,
        step_frames: 0,
        al,
        dal: al,
        bleu,
        token_accuracy: 0.0,
    }
}
