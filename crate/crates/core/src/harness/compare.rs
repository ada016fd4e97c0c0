use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::curves::CurvePoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedPoint {
    pub baseline_al: f64,
    pub baseline_bleu: f64,
    pub treatment_al: f64,
    pub treatment_bleu: f64,
    pub delta: f64,
    /// Relative gain in percent; absent when the baseline BLEU is zero.
    pub percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pairs: Vec<PairedPoint>,
    pub mean_delta: f64,
    pub mean_percent: Option<f64>,
    /// Treatment points left without a baseline partner.
    pub unpaired: usize,
}

/// Pairs each treatment point with the unused baseline point of nearest AL
/// among those whose AL is at least the treatment's. Treatment points are
/// taken in order of increasing AL, and each baseline point is used once.
pub fn compare(baseline: &[CurvePoint], treatment: &[CurvePoint]) -> Result<Comparison> {
    let mut order: Vec<usize> = (0..treatment.len()).collect();
    order.sort_by(|&a, &b| treatment[a].al.total_cmp(&treatment[b].al).then(a.cmp(&b)));
    let mut used = vec![false; baseline.len()];
    let mut pairs = Vec::new();
    for &k in &order {
        let t = &treatment[k];
        let best = baseline
            .iter()
            .enumerate()
            .filter(|(i, b)| !used[*i] && b.al >= t.al)
            .min_by(|(i, a), (j, b)| (a.al - t.al).total_cmp(&(b.al - t.al)).then(i.cmp(j)));
        if let Some((i, b)) = best {
            used[i] = true;
            let delta = t.bleu - b.bleu;
            pairs.push(PairedPoint {
                baseline_al: b.al,
                baseline_bleu: b.bleu,
                treatment_al: t.al,
                treatment_bleu: t.bleu,
                delta,
                percent: (b.bleu != 0.0).then(|| 100.0 * delta / b.bleu),
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoComparablePoints);
    }
    let n = pairs.len() as f64;
    let pct: Vec<f64> = pairs.iter().filter_map(|p| p.percent).collect();
    Ok(Comparison {
        mean_delta: pairs.iter().map(|p| p.delta).sum::<f64>() / n,
        mean_percent: (!pct.is_empty()).then(|| pct.iter().sum::<f64>() / pct.len() as f64),
        unpaired: treatment.len() - pairs.len(),
        pairs,
    })
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>3}  {:>10} {:>10}  {:>10} {:>10}  {:>7} {:>8}",
            "#", "base AL", "base BLEU", "treat AL", "treat BLEU", "ΔBLEU", "%Δ"
        );
        for (i, p) in self.pairs.iter().enumerate() {
            let pct = p.percent.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                s,
                "{:>3}  {:>10.2} {:>10.2}  {:>10.2} {:>10.2}  {:>7.2} {:>8}",
                i + 1,
                p.baseline_al,
                p.baseline_bleu,
                p.treatment_al,
                p.treatment_bleu,
                p.delta,
                pct
            );
        }
        let pct = self.mean_percent.map_or("-".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "mean ΔBLEU {:.3}  mean %Δ {}", self.mean_delta, pct);
        if self.unpaired > 0 {
            let _ = writeln!(s, "{} treatment point(s) had no baseline at or above their AL", self.unpaired);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(al: f64, bleu: f64) -> CurvePoint {
        CurvePoint {
            model: "m".into(),
            lambda: 0.0,
            step_frames: 1,
            al,
            dal: al,
            bleu,
            token_accuracy: 0.0,
        }
    }

    #[test]
    fn identical_sets_give_zero_deltas() {
        let a = vec![pt(3.0, 10.0), pt(5.0, 12.0), pt(8.0, 15.0)];
        let c = compare(&a, &a).unwrap();
        assert_eq!(c.pairs.len(), 3);
        assert!(c.pairs.iter().all(|p| p.delta == 0.0 && p.baseline_al == p.treatment_al));
    }

    #[test]
    fn first_two_rows_of_published_table() {
        let base = vec![pt(775.0, 6.5), pt(1220.0, 10.08)];
        let treat = vec![pt(765.0, 7.9), pt(1089.0, 11.40)];
        let c = compare(&base, &treat).unwrap();
        assert!((c.pairs[0].delta - 1.40).abs() < 1e-9);
        assert!((c.pairs[1].delta - 1.32).abs() < 1e-9);
        assert!((c.pairs[0].percent.unwrap() - 21.54).abs() < 0.01);
        assert!((c.pairs[1].percent.unwrap() - 13.10).abs() < 0.01);
    }

    #[test]
    fn baseline_points_are_used_once() {
        let base = vec![pt(10.0, 1.0)];
        let treat = vec![pt(4.0, 2.0), pt(5.0, 3.0)];
        let c = compare(&base, &treat).unwrap();
        assert_eq!(c.pairs.len(), 1);
        assert_eq!(c.pairs[0].treatment_al, 4.0);
        assert_eq!(c.unpaired, 1);
    }

    #[test]
    fn disjoint_ranges() {
        let base = vec![pt(1.0, 1.0)];
        let treat = vec![pt(2.0, 1.0)];
        assert!(matches!(compare(&base, &treat), Err(Error::NoComparablePoints)));
        assert!(matches!(compare(&[], &treat), Err(Error::NoComparablePoints)));
    }

    #[test]
    fn zero_baseline_bleu_has_no_percent() {
        let c = compare(&[pt(2.0, 0.0)], &[pt(1.0, 3.0)]).unwrap();
        assert_eq!(c.pairs[0].percent, None);
        assert_eq!(c.mean_percent, None);
        assert!(c.table().contains('-'));
    }
}
