use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::latency::{average_lagging, dal_metric, DelayVector};
use crate::model::Model;
use crate::policy::{simulate_decode, DecisionTrace, EncoderMode, PolicyConfig, StreamInput};

use super::data::PairedExample;

fn ngram_counts(xs: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU (n ≤ 4, uniform weights, brevity penalty, no smoothing) on
/// a 0–100 scale.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|n| (matches[n] as f64 / totals[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

/// Position-wise matches over total reference length.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    hits as f64 / total as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Speech,
    Text,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QualityReport {
    pub bleu: f64,
    pub token_accuracy: f64,
    /// Mean per-sentence AL in source units (frames or tokens).
    pub al: f64,
    pub dal: f64,
    /// Mean over written tokens of (complete source tokens received − i).
    pub read_ahead: f64,
    pub sentences: usize,
}

pub struct EvalOutput {
    pub report: QualityReport,
    pub traces: Vec<DecisionTrace>,
}

fn source_len(ex: &PairedExample, branch: Branch) -> usize {
    match branch {
        Branch::Speech => ex.frames.len(),
        Branch::Text => ex.transcript.len(),
    }
}

/// Greedy simultaneous decoding of every example at `step` source units
/// per read; `None` reads the whole source at once.
pub fn evaluate_quality(
    model: &Model,
    examples: &[PairedExample],
    step: Option<usize>,
    mode: EncoderMode,
    branch: Branch,
) -> Result<EvalOutput> {
    let traces = examples
        .par_iter()
        .map(|ex| {
            let n = source_len(ex, branch);
            let cfg = PolicyConfig::with_step(step.unwrap_or(n).max(1));
            let input = match branch {
                Branch::Speech => StreamInput::Speech(&ex.frames),
                Branch::Text => StreamInput::Text(&ex.transcript),
            };
            simulate_decode(model, input, &cfg, mode, Some(2 * ex.transcript.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let hyps: Vec<Vec<usize>> = traces.iter().map(|t| t.output.clone()).collect();
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.tokens.clone()).collect();
    let (mut al, mut dal) = (0.0, 0.0);
    let (mut lead, mut written) = (0.0, 0usize);
    for (ex, tr) in examples.iter().zip(&traces) {
        let n = source_len(ex, branch);
        if tr.delays.is_empty() {
            al += n as f64;
            dal += n as f64;
            continue;
        }
        let d = DelayVector::from_counts(&tr.delays, n)?;
        al += average_lagging(&d);
        dal += dal_metric(&d);
        for (i, &di) in tr.delays.iter().enumerate() {
            let received = match branch {
                Branch::Speech => ex.tokens_received(di),
                Branch::Text => di,
            };
            lead += received as f64 - (i + 1) as f64;
            written += 1;
        }
    }
    let count = examples.len().max(1) as f64;
    Ok(EvalOutput {
        report: QualityReport {
            bleu: corpus_bleu(&hyps, &refs),
            token_accuracy: token_accuracy(&hyps, &refs),
            al: al / count,
            dal: dal / count,
            read_ahead: if written > 0 { lead / written as f64 } else { 0.0 },
            sentences: examples.len(),
        },
        traces,
    })
}
