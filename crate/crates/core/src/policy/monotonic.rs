//! Training-time monotonic attention: energies, write probabilities, the
//! closed-form expected alignment and the expected context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Training-time clamp on write probabilities.
pub const PROB_EPS: f64 = 1e-6;

/// `e = q·kᵀ/√d_h + bias` for one head: `queries[I×d_h]`, `keys[J×d_h]`,
/// `bias` a scalar.
pub fn monotonic_energy(t: &mut Tape, queries: Var, keys: Var, bias: Var) -> Result<Var> {
    let dh = t.shape(queries)[1];
    let kt = t.transpose(keys)?;
    let s = t.matmul(queries, kt)?;
    let s = t.scale(s, 1.0 / (dh as f64).sqrt());
    t.add(s, bias)
}

/// Elementwise sigmoid, optionally clamped to `[ε, 1−ε]`.
pub fn selection_prob(t: &mut Tape, energies: Var, clamp: bool) -> Var {
    let p = t.sigmoid(energies);
    if clamp {
        t.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    } else {
        p
    }
}

/// Expected alignment `α[I×J]` of one head from write probabilities.
pub fn expected_alignment(t: &mut Tape, probs: Var) -> Result<Var> {
    t.monotonic_alignment(probs)
}

/// Per-head `α_h · V_h`, heads concatenated along columns, then mixed by
/// `wo`. Residual (unassigned) alignment mass contributes nothing.
pub fn monotonic_context(t: &mut Tape, alphas: &[Var], values: Var, wo: Var) -> Result<Var> {
    let d = t.shape(values)[1];
    let heads = alphas.len();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("monotonic_context", t.shape(values), &[heads]));
    }
    let dh = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for (h, &a) in alphas.iter().enumerate() {
        let vh = t.cols(values, h * dh, (h + 1) * dh)?;
        parts.push(t.matmul(a, vh)?);
    }
    let c = if heads == 1 { parts[0] } else { t.concat_cols(&parts)? };
    t.matmul(c, wo)
}

/// Energies `e[h, i, j]` stored row-major as `[H×I×J]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyMatrix {
    pub heads: usize,
    pub steps: usize,
    pub positions: usize,
    pub data: Vec<f64>,
}

impl EnergyMatrix {
    pub fn new(heads: usize, steps: usize, positions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * steps * positions {
            return Err(Error::shape("energy_matrix", &[heads, steps, positions], &[data.len()]));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain {
                op: "energy_matrix",
                msg: "non-finite energy".into(),
            });
        }
        Ok(EnergyMatrix {
            heads,
            steps,
            positions,
            data,
        })
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.data[(h * self.steps + i) * self.positions + j]
    }

    /// Collects one `[I×J]` tape value per head.
    pub fn from_heads(t: &Tape, heads: &[Var]) -> Result<Self> {
        let shape = t.shape(heads[0]).to_vec();
        let mut data = Vec::with_capacity(heads.len() * shape[0] * shape[1]);
        for &h in heads {
            if t.shape(h) != shape.as_slice() {
                return Err(Error::shape("energy_matrix", &shape, t.shape(h)));
            }
            data.extend_from_slice(t.value(h));
        }
        Self::new(heads.len(), shape[0], shape[1], data)
    }
}

/// Expected alignment `α[h, i, j]` stored row-major as `[H×I×J]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub heads: usize,
    pub steps: usize,
    pub positions: usize,
    pub alpha: Vec<f64>,
}

impl AlignmentMatrix {
    /// No-grad evaluation of the recurrence on `p[H×I×J]`.
    pub fn from_probs(p: &[f64], heads: usize, steps: usize, positions: usize) -> Result<Self> {
        if p.len() != heads * steps * positions {
            return Err(Error::shape("expected_alignment", &[heads, steps, positions], &[p.len()]));
        }
        let mut alpha = Vec::with_capacity(p.len());
        for h in 0..heads {
            let block = &p[h * steps * positions..(h + 1) * steps * positions];
            alpha.extend(crate::tensor::alignment_values(block, steps, positions));
        }
        Ok(AlignmentMatrix {
            heads,
            steps,
            positions,
            alpha,
        })
    }

    pub fn row(&self, h: usize, i: usize) -> &[f64] {
        let start = (h * self.steps + i) * self.positions;
        &self.alpha[start..start + self.positions]
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.row(h, i)[j]
    }

    /// `1 − Σ_j α[h, i, j]`.
    pub fn residual(&self, h: usize, i: usize) -> f64 {
        1.0 - self.row(h, i).iter().sum::<f64>()
    }

    /// Expected 1-based attended position with the residual mass placed at
    /// the last position `J`.
    pub fn expected_position(&self, h: usize, i: usize) -> f64 {
        let row = self.row(h, i);
        let placed: f64 = row.iter().enumerate().map(|(j, a)| (j + 1) as f64 * a).sum();
        placed + self.positions as f64 * self.residual(h, i)
    }
}
