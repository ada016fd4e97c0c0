use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::dal_loss;
use crate::model::{Attention, Fwd, Model};
use crate::regularizers::{car_loss, dar_loss, kd_loss};
use crate::tensor::Var;

use super::data::PairedExample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Online distillation.
    pub alpha: f64,
    /// Encoder-state regularizer.
    pub beta: f64,
    /// Text-branch NLL.
    pub gamma: f64,
    /// Energy regularizer.
    pub delta: f64,
    /// Latency.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Baseline,
    Multitask,
    Kd,
    Car,
    Dar,
}

impl Ablation {
    pub const LADDER: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::Multitask,
        Ablation::Kd,
        Ablation::Car,
        Ablation::Dar,
    ];
}

impl LossWeights {
    /// Speech NLL only.
    pub fn baseline() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            lambda: 0.0,
        }
    }

    /// Every regularizer on, no latency term.
    pub fn full() -> Self {
        Self::preset(Ablation::Dar)
    }

    /// Cumulative presets: each rung adds one term to the previous one.
    pub fn preset(rung: Ablation) -> Self {
        let mut w = Self::baseline();
        let level = Ablation::LADDER.iter().position(|&r| r == rung).unwrap_or(0);
        if level >= 1 {
            w.gamma = 0.5;
        }
        if level >= 2 {
            w.alpha = 0.2;
        }
        if level >= 3 {
            w.beta = 0.02;
        }
        if level >= 4 {
            w.delta = 0.01;
        }
        w
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.lambda];
        if all.iter().any(|w| !(*w >= 0.0)) || self.alpha > 1.0 {
            return Err(Error::Config("loss weights must be ≥ 0 with alpha ≤ 1".into()));
        }
        Ok(())
    }

    pub fn needs_text(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0 || self.gamma > 0.0 || self.delta > 0.0
    }
}

/// Unweighted loss terms of one example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub st_nll: f64,
    pub kd: f64,
    pub car: f64,
    pub mt_nll: f64,
    pub dar: f64,
    pub dal: f64,
}

impl LossTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        (1.0 - w.alpha) * self.st_nll
            + w.alpha * self.kd
            + w.beta * self.car
            + w.gamma * self.mt_nll
            + w.delta * self.dar
            + w.lambda * self.dal
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.st_nll += o.st_nll;
        self.kd += o.kd;
        self.car += o.car;
        self.mt_nll += o.mt_nll;
        self.dar += o.dar;
        self.dal += o.dal;
    }

    pub fn scale(&mut self, c: f64) {
        self.st_nll *= c;
        self.kd *= c;
        self.car *= c;
        self.mt_nll *= c;
        self.dar *= c;
        self.dal *= c;
    }
}

/// Which terms to put on the tape: terms with zero weight are skipped
/// unless `all` is set.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermMask {
    pub all: bool,
}

pub struct JointLoss {
    pub total: Var,
    pub terms: LossTerms,
    /// Handles of the individual (unweighted) terms that were built.
    pub parts: Vec<(&'static str, Var)>,
}

/// Teacher-forces both branches on the example's target and combines
/// `(1−α)·ST + α·KD + β·CAR + γ·MT + δ·DAR + λ·DAL`.
pub fn joint_loss(f: &mut Fwd, model: &Model, ex: &PairedExample, w: &LossWeights, mask: TermMask) -> Result<JointLoss> {
    w.validate()?;
    let on = |x: f64| mask.all || x > 0.0;
    let inputs = model.decoder_inputs(&ex.target);
    let targets = model.decoder_targets(&ex.target);
    let smoothing = model.cfg.label_smoothing;

    let frames = f.t.leaf(&ex.frames.frames);
    let hs = model.encode_speech_vars(f, frames)?;
    let speech = model.decode_vars(f, hs, &inputs, Attention::Expected)?;
    let st = f.t.cross_entropy(speech.logits, &targets, smoothing)?;
    let mut parts = vec![("st_nll", st)];

    if mask.all || w.needs_text() {
        let ht = model.encode_text_vars(f, &ex.transcript.tokens)?;
        let text = model.decode_vars(f, ht, &inputs, Attention::Expected)?;
        if on(w.alpha) {
            parts.push(("kd", kd_loss(f.t, speech.logits, text.logits)?));
        }
        if on(w.beta) {
            parts.push(("car", car_loss(f.t, hs, ht)?));
        }
        if on(w.gamma) {
            parts.push(("mt_nll", f.t.cross_entropy(text.logits, &targets, smoothing)?));
        }
        if on(w.delta) {
            let k = f.t.shape(hs)[0];
            let l = f.t.shape(ht)[0];
            parts.push(("dar", dar_loss(f.t, &speech.energies, &text.energies, k, l)?));
        }
    }
    if on(w.lambda) {
        let alphas: Vec<Var> = speech.alphas.iter().flatten().copied().collect();
        let k = f.t.shape(hs)[0];
        parts.push(("dal", dal_loss(f.t, &alphas, k, inputs.len())?));
    }

    let mut terms = LossTerms::default();
    let mut total: Option<Var> = None;
    for &(name, v) in &parts {
        let value = f.t.item(v);
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let weight = match name {
            "st_nll" => {
                terms.st_nll = value;
                1.0 - w.alpha
            }
            "kd" => {
                terms.kd = value;
                w.alpha
            }
            "car" => {
                terms.car = value;
                w.beta
            }
            "mt_nll" => {
                terms.mt_nll = value;
                w.gamma
            }
            "dar" => {
                terms.dar = value;
                w.delta
            }
            _ => {
                terms.dal = value;
                w.lambda
            }
        };
        let scaled = f.t.scale(v, weight);
        total = Some(match total {
            None => scaled,
            Some(acc) => f.t.add(acc, scaled)?,
        });
    }
    Ok(JointLoss {
        total: total.expect("speech NLL is always present"),
        terms,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_set_terms_combine() {
        let t = LossTerms {
            st_nll: 1.0,
            kd: 2.0,
            car: 3.0,
            mt_nll: 4.0,
            dar: 5.0,
            dal: 6.0,
        };
        let w = LossWeights::full().with_lambda(0.1);
        assert!((t.weighted_total(&w) - 3.91).abs() < 1e-12);
    }

    #[test]
    fn presets_form_a_ladder() {
        let b = LossWeights::preset(Ablation::Baseline);
        assert_eq!(b, LossWeights::baseline());
        assert!(!b.needs_text());
        let full = LossWeights::preset(Ablation::Dar);
        assert_eq!((full.alpha, full.beta, full.gamma, full.delta), (0.2, 0.02, 0.5, 0.01));
        assert_eq!(LossWeights::preset(Ablation::Kd).beta, 0.0);
        assert!(LossWeights { alpha: 1.5, ..full }.validate().is_err());
    }
}
