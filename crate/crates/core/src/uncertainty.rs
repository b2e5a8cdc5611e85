//! Monte-Carlo dropout summaries, calibration statistics and review triage.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HistoError, Result};
use crate::model::Model;
use crate::nn::Tensor;

pub const DEFAULT_PASSES: usize = 20;
pub const DEFAULT_TRIAGE_THRESHOLD: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mean_probs: Vec<f64>,
    /// Mean over classes of the per-class variance across passes.
    pub uncertainty: f64,
    pub confidence: f64,
}

/// Summarizes a `T×C` matrix of per-pass probabilities for one sample.
pub fn summarize(samples: &Array2<f64>) -> Result<Summary> {
    let (t, c) = samples.dim();
    if t == 0 || c == 0 {
        return Err(HistoError::invalid("cannot summarize an empty sample matrix"));
    }
    let mean = samples.mean_axis(Axis(0)).expect("t > 0");
    let var = samples.var_axis(Axis(0), 0.0);
    Ok(Summary {
        confidence: mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        uncertainty: var.mean().unwrap_or(0.0),
        mean_probs: mean.to_vec(),
    })
}

/// Per-sample summaries over a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// `N` rows of `C` mean probabilities.
    pub mean_probs: Vec<Vec<f64>>,
    pub uncertainty: Vec<f64>,
    pub confidence: Vec<f64>,
    /// Predictive entropy of the mean probabilities (auxiliary).
    pub entropy: Vec<f64>,
    pub flags: Vec<bool>,
}

impl UncertaintyReport {
    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    /// Argmax of each mean-probability row; the lowest index wins ties.
    pub fn predictions(&self) -> Vec<usize> {
        self.mean_probs.iter().map(|r| argmax(r)).collect()
    }

    /// Builds a report from per-sample means and uncertainties.
    pub fn from_parts(mean_probs: Vec<Vec<f64>>, uncertainty: Vec<f64>, threshold: f64) -> Result<Self> {
        let confidence: Vec<f64> = mean_probs
            .iter()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let entropy = mean_probs
            .iter()
            .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .collect();
        let flags = triage(&confidence, threshold)?;
        Ok(Self {
            mean_probs,
            uncertainty,
            confidence,
            entropy,
            flags,
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Combines `T` pass matrices (each `N×C`) into per-sample summaries.
pub fn summarize_passes(passes: &[Array2<f64>], threshold: f64) -> Result<UncertaintyReport> {
    let first = passes
        .first()
        .ok_or_else(|| HistoError::invalid("at least one Monte-Carlo pass is required"))?;
    let (n, c) = first.dim();
    if passes.iter().any(|p| p.dim() != (n, c)) {
        return Err(HistoError::invalid("Monte-Carlo passes disagree in shape"));
    }
    let mut means = Vec::with_capacity(n);
    let mut unc = Vec::with_capacity(n);
    for i in 0..n {
        let samples = Array2::from_shape_fn((passes.len(), c), |(t, k)| passes[t][[i, k]]);
        let s = summarize(&samples)?;
        means.push(s.mean_probs);
        unc.push(s.uncertainty);
    }
    UncertaintyReport::from_parts(means, unc, threshold)
}

/// `passes` stochastic forward passes of `model` summarized per sample.
pub fn mc_forward(
    model: &Model,
    maps: &[Tensor],
    magnifications: &[usize],
    passes: usize,
    seed: Option<u64>,
    threshold: f64,
) -> Result<UncertaintyReport> {
    let samples = model.mc_proba(maps, magnifications, passes, seed)?;
    summarize_passes(&samples, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub avg_confidence: f64,
    /// Mean confidence over correct predictions; absent when there are none.
    pub correct_confidence: Option<f64>,
    pub wrong_confidence: Option<f64>,
    pub n_correct: usize,
    pub n_wrong: usize,
}

pub fn calibration(mean_probs: &[Vec<f64>], labels: &[usize]) -> Result<Calibration> {
    if mean_probs.is_empty() || mean_probs.len() != labels.len() {
        return Err(HistoError::invalid("calibration needs one label per non-empty probability row"));
    }
    let (mut all, mut right, mut wrong) = (0.0, 0.0, 0.0);
    let (mut nr, mut nw) = (0, 0);
    for (p, &y) in mean_probs.iter().zip(labels) {
        let conf = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        all += conf;
        if argmax(p) == y {
            right += conf;
            nr += 1;
        } else {
            wrong += conf;
            nw += 1;
        }
    }
    Ok(Calibration {
        avg_confidence: all / labels.len() as f64,
        correct_confidence: (nr > 0).then(|| right / nr as f64),
        wrong_confidence: (nw > 0).then(|| wrong / nw as f64),
        n_correct: nr,
        n_wrong: nw,
    })
}

/// `true` marks a sample for human review (confidence below the threshold).
pub fn triage(confidence: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(HistoError::Config(format!("triage threshold must lie in (0, 1], got {threshold}")));
    }
    Ok(confidence.iter().map(|&c| c < threshold).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::layers::normal;
    use crate::rng::rng_for;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn summarize_examples() {
        let one = Array2::from_shape_vec((1, 3), vec![0.2, 0.5, 0.3]).unwrap();
        let s = summarize(&one).unwrap();
        assert_eq!(s.uncertainty, 0.0);
        assert_eq!(s.confidence, 0.5);

        let two = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = summarize(&two).unwrap();
        assert_eq!(s.mean_probs, vec![0.5, 0.5]);
        assert_eq!(s.uncertainty, 0.25);
        assert_eq!(s.confidence, 0.5);

        let same = Array2::from_shape_fn((5, 3), |(_, k)| [0.1, 0.6, 0.3][k]);
        assert_eq!(summarize(&same).unwrap().uncertainty, 0.0);
    }

    #[test]
    fn calibration_examples() {
        let probs = vec![vec![0.9, 0.1], vec![0.6, 0.4]];
        let c = calibration(&probs, &[0, 1]).unwrap();
        assert_abs_diff_eq!(c.correct_confidence.unwrap(), 0.9);
        assert_abs_diff_eq!(c.wrong_confidence.unwrap(), 0.6);
        assert_abs_diff_eq!(c.avg_confidence, 0.75);

        let c = calibration(&probs, &[0, 0]).unwrap();
        assert_eq!(c.wrong_confidence, None);
        assert_eq!(c.correct_confidence, Some(c.avg_confidence));

        let swapped = calibration(&[probs[1].clone(), probs[0].clone()], &[1, 0]).unwrap();
        assert_eq!(swapped, calibration(&probs, &[0, 1]).unwrap());
        assert!(calibration(&[], &[]).is_err());
    }

    #[test]
    fn triage_examples() {
        assert_eq!(triage(&[0.81, 0.79, 0.8], 0.8).unwrap(), vec![false, true, false]);
        assert_eq!(triage(&[0.999, 0.3], 1.0).unwrap(), vec![true, true]);
        assert!(triage(&[0.5], 0.0).is_err());
    }

    fn tiny_model(rate: f64) -> (Model, Vec<Tensor>) {
        let cfg = ModelConfig {
            dropout_rate: rate,
            ..Default::default()
        };
        let m = Model::init(&cfg, &[8], 8, 4).unwrap();
        let maps = vec![normal(&mut rng_for(1, &[]), &[3, 8, 7, 7], 1.0).mapv(f64::abs)];
        (m, maps)
    }

    #[test]
    fn no_dropout_means_no_uncertainty() {
        let (m, maps) = tiny_model(0.0);
        let r = mc_forward(&m, &maps, &[0; 3], 20, Some(3), 0.8).unwrap();
        assert!(r.uncertainty.iter().all(|&u| u == 0.0));
        let (m, _) = tiny_model(0.3);
        let r = mc_forward(&m, &maps, &[0; 3], 20, None, 0.8).unwrap();
        assert!(r.uncertainty.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn mc_report_contracts() {
        let (m, maps) = tiny_model(0.3);
        let r = mc_forward(&m, &maps, &[0; 3], 20, Some(9), 0.8).unwrap();
        assert_eq!(r, mc_forward(&m, &maps, &[0; 3], 20, Some(9), 0.8).unwrap());
        for (row, &conf) in r.mean_probs.iter().zip(&r.confidence) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert!(conf >= 1.0 / 8.0 - 1e-12 && conf <= 1.0);
        }
        assert!(r.uncertainty.iter().all(|&u| u > 0.0));
        assert!(mc_forward(&m, &maps, &[0; 3], 0, Some(9), 0.8).is_err());
    }

    #[test]
    fn more_passes_converge() {
        let (m, maps) = tiny_model(0.3);
        let a = mc_forward(&m, &maps, &[0; 3], 200, Some(1), 0.8).unwrap();
        let b = mc_forward(&m, &maps, &[0; 3], 2000, Some(2), 0.8).unwrap();
        for (ra, rb) in a.mean_probs.iter().zip(&b.mean_probs) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() <= 0.05);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn uncertainty_ignores_pass_order(seed in 0u64..10_000, t in 1usize..12) {
            use rand::Rng;
            let mut rng = rng_for(seed, &[]);
            let rows: Vec<Vec<f64>> = (0..t).map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            }).collect();
            let a = Array2::from_shape_vec((t, 4), rows.concat()).unwrap();
            let mut rev = rows.clone();
            rev.reverse();
            let b = Array2::from_shape_vec((t, 4), rev.concat()).unwrap();
            let sa = summarize(&a).unwrap();
            let sb = summarize(&b).unwrap();
            prop_assert!((sa.uncertainty - sb.uncertainty).abs() <= 1e-15);
            prop_assert!(sa.uncertainty >= 0.0);
            prop_assert!((sa.mean_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}
