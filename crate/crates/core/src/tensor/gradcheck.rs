// Central finite-difference oracle for tape gradients.

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// (input, element, analytic, numeric) at the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }

    /// Records one comparison; `floor` keeps the ratio meaningful for
    /// gradients that are zero up to roundoff.
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / (analytic.abs() + floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

/// `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for every coordinate `k`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares tape gradients of `build` against central differences for every
/// element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.input(&t.shape, t.data.clone(), true))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad(v)).collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.input(&t.shape, t.data.clone(), false))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.item(loss))
    };

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (n, input) in inputs.iter().enumerate() {
        for k in 0..input.data.len() {
            probe[n].data[k] = input.data[k] + h;
            let up = eval(&probe)?;
            probe[n].data[k] = input.data[k] - h;
            let down = eval(&probe)?;
            probe[n].data[k] = input.data[k];
            report.record(n, k, analytic[n][k], (up - down) / (2.0 * h), floor);
        }
    }
    Ok(report)
}
