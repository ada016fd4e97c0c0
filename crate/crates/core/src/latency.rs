//! Average Lagging and Differentiable Average Lagging, as metrics over
//! delays and as a training loss over expected alignments.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Source units consumed before each target token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayVector {
    pub delays: Vec<f64>,
    pub src_len: f64,
    pub tgt_len: f64,
}

impl DelayVector {
    /// Delays for an output of `delays.len()` tokens.
    pub fn new(delays: Vec<f64>, src_len: f64) -> Result<Self> {
        let tgt_len = delays.len() as f64;
        Self::with_target_len(delays, src_len, tgt_len)
    }

    pub fn with_target_len(delays: Vec<f64>, src_len: f64, tgt_len: f64) -> Result<Self> {
        if delays.is_empty() {
            return Err(Error::Input("empty output sequence".into()));
        }
        if !(src_len > 0.0) || !(tgt_len > 0.0) {
            return Err(Error::Input("source and target lengths must be positive".into()));
        }
        if delays.iter().any(|d| !d.is_finite()) {
            return Err(Error::Input("non-finite delay".into()));
        }
        Ok(DelayVector {
            delays,
            src_len,
            tgt_len,
        })
    }

    pub fn from_counts(delays: &[usize], src_len: usize) -> Result<Self> {
        Self::new(delays.iter().map(|&d| d as f64).collect(), src_len as f64)
    }
}

/// `AL = (1/τ) Σ_{i≤τ} (d_i − (i−1)/γ)` with `γ = |y|/|x|` and `τ` the
/// first index whose delay reaches `|x|` (or `|y|` if none does).
pub fn average_lagging(d: &DelayVector) -> f64 {
    let rate = d.tgt_len / d.src_len;
    let n = d.delays.len();
    let tau = d
        .delays
        .iter()
        .position(|&x| x >= d.src_len)
        .map_or(n, |i| i + 1);
    let total: f64 = d.delays[..tau]
        .iter()
        .enumerate()
        .map(|(i, &x)| x - i as f64 / rate)
        .sum();
    total / tau as f64
}

/// `DAL = (1/|y|) Σ_i (d'_i − (i−1)γ')`, `γ' = |x|/|y|`, `d'_1 = d_1`,
/// `d'_i = max(d_i, d'_{i−1} + γ')`.
pub fn dal_metric(d: &DelayVector) -> f64 {
    let gamma = d.src_len / d.tgt_len;
    let mut prev = f64::NEG_INFINITY;
    let mut total = 0.0;
    for (i, &x) in d.delays.iter().enumerate() {
        let cur = x.max(prev + gamma);
        total += cur - i as f64 * gamma;
        prev = cur;
    }
    total / d.delays.len() as f64
}

/// Expected delays `[I]` in encoder positions, averaged over the given
/// alignments; residual mass counts as position `J`.
pub fn expected_delays(t: &mut Tape, alphas: &[Var]) -> Result<Var> {
    let Some(&first) = alphas.first() else {
        return Err(Error::Input("no alignments".into()));
    };
    let shape = t.shape(first).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("expected_delays", &shape, &[2]));
    }
    let (i_len, j_len) = (shape[0], shape[1]);
    let positions = t.constant(&[j_len, 1], (1..=j_len).map(|j| j as f64).collect())?;
    let mut acc = None;
    for &a in alphas {
        if t.shape(a) != shape.as_slice() {
            return Err(Error::shape("expected_delays", &shape, t.shape(a)));
        }
        let placed = t.matmul(a, positions)?;
        let placed = t.reshape(placed, &[i_len])?;
        let mass = t.sum_axis(a, 1)?;
        // J·(1 − mass)
        let residual = t.scale(mass, -(j_len as f64));
        let residual = t.add_scalar(residual, j_len as f64);
        let d = t.add(placed, residual)?;
        acc = Some(match acc {
            None => d,
            Some(s) => t.add(s, d)?,
        });
    }
    let sum = acc.expect("non-empty");
    Ok(t.scale(sum, 1.0 / alphas.len() as f64))
}

/// DAL of the expected delays, differentiable in every alignment (exact
/// max, so a.e. differentiable).
pub fn dal_loss(t: &mut Tape, alphas: &[Var], src_len: usize, tgt_len: usize) -> Result<Var> {
    let d = expected_delays(t, alphas)?;
    let i_len = t.shape(d)[0];
    if i_len == 0 || src_len == 0 || tgt_len == 0 {
        return Err(Error::Input("empty alignment".into()));
    }
    let gamma = src_len as f64 / tgt_len as f64;
    let mut prev: Option<Var> = None;
    let mut total = None;
    for i in 0..i_len {
        let di = t.select(d, i)?;
        let cur = match prev {
            None => di,
            Some(p) => {
                let floor = t.add_scalar(p, gamma);
                t.maximum(di, floor)?
            }
        };
        let term = t.add_scalar(cur, -(i as f64) * gamma);
        total = Some(match total {
            None => term,
            Some(s) => t.add(s, term)?,
        });
        prev = Some(cur);
    }
    Ok(t.scale(total.expect("non-empty"), 1.0 / i_len as f64))
}

/// One latency/quality measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub al: f64,
    pub dal: f64,
    pub quality: f64,
    pub step_frames: usize,
    pub model: String,
}

pub const REPORT_CSV_HEADER: &str = "al,dal,quality,step_frames,model";

impl LatencyReport {
    pub fn validate(&self) -> Result<()> {
        if [self.al, self.dal, self.quality].iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("latency report"))
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.al, self.dal, self.quality, self.step_frames, self.model)
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().splitn(5, ',').collect();
        let bad = || Error::Input(format!("malformed report row: {line}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(LatencyReport {
            al: num(f[0])?,
            dal: num(f[1])?,
            quality: num(f[2])?,
            step_frames: f[3].parse().map_err(|_| bad())?,
            model: f[4].to_string(),
        })
    }
}

pub fn write_reports_csv(w: &mut impl Write, reports: &[LatencyReport]) -> Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        r.validate()?;
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn read_reports_csv(text: &str) -> Result<Vec<LatencyReport>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_CSV_HEADER) {
        return Err(Error::Input("missing latency report header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(LatencyReport::parse_csv_row).collect()
}
