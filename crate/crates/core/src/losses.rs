//! The six-term training objective and its pieces.
//!
//! Every loss has a graph form used in training and a plain `f64` form used
//! for reporting and tests. Term order is fixed: focal, supcon, proto, morph,
//! spatial, bio.

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{HistoError, Result};
use crate::nn::{Graph, Tensor, Var};

pub const COMPONENTS: [&str; 6] = ["focal", "supcon", "proto", "morph", "spatial", "bio"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weights of (focal, supcon, proto, morph, spatial, bio).
    pub alpha: [f64; 6],
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [1.0, 0.5, 0.5, 0.1, 0.05, 0.1],
            gamma: 2.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    /// Plain cross-entropy only.
    pub fn cross_entropy_only() -> Self {
        Self {
            alpha: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            gamma: 0.0,
            tau: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(HistoError::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.alpha.iter().all(|&a| a == 0.0) {
            return Err(HistoError::Config("at least one loss weight must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(HistoError::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HistoError::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(HistoError::invalid(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(HistoError::invalid(format!("label {y} out of range for {c} classes")));
    }
    Ok(())
}

/// Focal loss on `N×C` logits; batch mean, or a class-weighted mean when weights are given.
pub fn focal_loss_graph(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (n, c) = (s[0], s[1]);
    if n == 0 {
        return Err(HistoError::invalid("focal loss on an empty batch"));
    }
    check_labels(labels, n, c)?;
    let lsm = g.log_softmax(logits);
    let log_pt = g.gather_rows(lsm, labels);
    let per = if gamma == 0.0 {
        g.scale(log_pt, -1.0)
    } else {
        let pt = g.exp(log_pt);
        let neg = g.scale(pt, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let modulator = g.powf(one_minus, gamma);
        let weighted = g.mul(modulator, log_pt);
        g.scale(weighted, -1.0)
    };
    match class_weights {
        None => Ok(g.mean(per)),
        Some(w) => {
            if w.len() != c {
                return Err(HistoError::invalid(format!("{} class weights for {c} classes", w.len())));
            }
            let wv: Vec<f64> = labels.iter().map(|&y| w[y]).collect();
            let total: f64 = wv.iter().sum();
            if total <= 0.0 {
                return Err(HistoError::invalid("class weights of the batch sum to zero"));
            }
            let wt = g.constant(Tensor::from_shape_vec(IxDyn(&[n]), wv).expect("length n"));
            let prod = g.mul(per, wt);
            let sum = g.sum(prod);
            Ok(g.scale(sum, 1.0 / total))
        }
    }
}

pub fn focal_loss(logits: &Array2<f64>, labels: &[usize], gamma: f64, class_weights: Option<&[f64]>) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone().into_dyn());
    let loss = focal_loss_graph(&mut g, l, labels, gamma, class_weights)?;
    Ok(g.item(loss))
}

/// Supervised contrastive loss on `N×E` embeddings.
///
/// Anchors without a positive are skipped; if none remain the batch is rejected.
pub fn supcon_loss_graph(g: &mut Graph, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = g.shape(z)[0];
    check_labels(labels, n, usize::MAX)?;
    if !(tau > 0.0) {
        return Err(HistoError::invalid("temperature must be positive"));
    }
    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Err(HistoError::invalid("batch has no positive pairs"));
    }

    let zt = g.transpose(z);
    let dots = g.matmul(z, zt);
    let sim = g.scale(dots, 1.0 / tau);
    // Row maxima are treated as constants; they cancel in the log-ratio.
    let row_max: Vec<f64> = g
        .value(sim)
        .outer_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = g.constant(Tensor::from_shape_vec(IxDyn(&[n, 1]), row_max).expect("n rows"));
    let logits = g.sub(sim, shift);
    let e = g.exp(logits);
    let off_diag = g.constant(Tensor::from_shape_fn(IxDyn(&[n, n]), |ix| if ix[0] == ix[1] { 0.0 } else { 1.0 }));
    let e_off = g.mul(e, off_diag);
    let denom = g.sum_axis(e_off, 1);
    let log_denom = g.ln(denom);
    let log_prob = g.sub(logits, log_denom);

    let weights = Tensor::from_shape_fn(IxDyn(&[n, n]), |ix| {
        let (i, j) = (ix[0], ix[1]);
        if i != j && labels[i] == labels[j] {
            1.0 / (positives[i] as f64 * anchors as f64)
        } else {
            0.0
        }
    });
    let w = g.constant(weights);
    let picked = g.mul(log_prob, w);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

pub fn supcon_loss(z: &Array2<f64>, labels: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(z.clone().into_dyn());
    let loss = supcon_loss_graph(&mut g, v, labels, tau)?;
    Ok(g.item(loss))
}

/// Mean squared discrepancy between features of an image and of its transform.
pub fn morph_loss_graph(g: &mut Graph, fx: Var, ftx: Var) -> Result<Var> {
    if g.shape(fx) != g.shape(ftx) {
        return Err(HistoError::invalid(format!(
            "morphology loss shape mismatch: {:?} vs {:?}",
            g.shape(fx),
            g.shape(ftx)
        )));
    }
    let d = g.sub(fx, ftx);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

pub fn morph_loss(fx: &[f64], ftx: &[f64]) -> Result<f64> {
    if fx.len() != ftx.len() {
        return Err(HistoError::invalid(format!(
            "morphology loss dimension mismatch: {} vs {}",
            fx.len(),
            ftx.len()
        )));
    }
    if fx.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = fx.iter().zip(ftx).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / fx.len() as f64)
}

/// Anisotropic total variation of `N×1×h×w` masks, averaged over neighbour
/// pairs, samples and backbones.
pub fn spatial_loss_graph(g: &mut Graph, masks: &[Var]) -> Result<Var> {
    if masks.is_empty() {
        return Err(HistoError::invalid("spatial loss needs at least one mask"));
    }
    let mut terms = Vec::with_capacity(masks.len());
    for &m in masks {
        let s = g.shape(m).to_vec();
        let (n, h, w) = (s[0], s[2], s[3]);
        let pairs = (h.saturating_sub(1)) * w + h * (w.saturating_sub(1));
        if n == 0 || pairs == 0 {
            let z = g.scalar(0.0);
            terms.push((1.0, z));
            continue;
        }
        let mut parts = Vec::new();
        if h > 1 {
            let lo = g.slice_axis(m, 2, 0, h - 1);
            let hi = g.slice_axis(m, 2, 1, h);
            let d = g.sub(hi, lo);
            let a = g.abs(d);
            parts.push((1.0, g.sum(a)));
        }
        if w > 1 {
            let lo = g.slice_axis(m, 3, 0, w - 1);
            let hi = g.slice_axis(m, 3, 1, w);
            let d = g.sub(hi, lo);
            let a = g.abs(d);
            parts.push((1.0, g.sum(a)));
        }
        let tv = g.weighted_sum(&parts);
        terms.push((1.0 / (n * pairs) as f64, tv));
    }
    let total = g.weighted_sum(&terms);
    Ok(g.scale(total, 1.0 / masks.len() as f64))
}

/// Total variation of single `h×w` masks, averaged over the list.
pub fn spatial_loss(masks: &[Array2<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = masks
        .iter()
        .map(|m| {
            let (h, w) = m.dim();
            g.constant(m.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).expect("same size"))
        })
        .collect();
    let loss = spatial_loss_graph(&mut g, &vars)?;
    Ok(g.item(loss))
}

/// Row-stochastic `C×C` matrix averaging probability within superclasses.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub r: Array2<f64>,
}

/// `taxonomy[c]` is the superclass of class `c`. `w_same` blends block
/// averaging with the identity: `R = w_same·B + (1 − w_same)·I`.
pub fn build_relation_matrix(taxonomy: &[usize], w_same: f64) -> Result<RelationMatrix> {
    if taxonomy.is_empty() {
        return Err(HistoError::invalid("taxonomy is empty"));
    }
    if !(w_same > 0.0 && w_same <= 1.0) {
        return Err(HistoError::Config(format!("w_same must lie in (0, 1], got {w_same}")));
    }
    let c = taxonomy.len();
    let r = Array2::from_shape_fn((c, c), |(i, j)| {
        let block = if taxonomy[i] == taxonomy[j] {
            1.0 / taxonomy.iter().filter(|&&s| s == taxonomy[i]).count() as f64
        } else {
            0.0
        };
        w_same * block + if i == j { 1.0 - w_same } else { 0.0 }
    });
    Ok(RelationMatrix { r })
}

/// Batch mean of `‖p − R p‖²` with `p = softmax(logits)`.
pub fn bio_loss_graph(g: &mut Graph, logits: Var, relation: &RelationMatrix) -> Var {
    let n = g.shape(logits)[0].max(1);
    let p = g.softmax(logits);
    // Rows are samples, so R p becomes p Rᵀ.
    let rt = g.constant(relation.r.t().as_standard_layout().into_owned().into_dyn());
    let rp = g.matmul(p, rt);
    let d = g.sub(p, rp);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / n as f64)
}

pub fn bio_loss(p: &[f64], relation: &RelationMatrix) -> Result<f64> {
    let c = relation.r.nrows();
    if p.len() != c {
        return Err(HistoError::invalid(format!("{} probabilities for {c} classes", p.len())));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= -1e-12)) || (total - 1.0).abs() > 1e-6 {
        return Err(HistoError::invalid("probability vector is off the simplex"));
    }
    Ok((0..c)
        .map(|i| {
            let rp: f64 = (0..c).map(|j| relation.r[[i, j]] * p[j]).sum();
            (p[i] - rp).powi(2)
        })
        .sum())
}

/// `Σ α_i L_i` over the fixed component order.
pub fn total_loss(components: &[f64; 6], weights: &LossWeights) -> Result<f64> {
    if let Some(i) = components.iter().position(|v| !v.is_finite()) {
        return Err(HistoError::NonFiniteLoss {
            component: COMPONENTS[i].to_string(),
        });
    }
    Ok(components.iter().zip(weights.alpha.iter()).map(|(l, a)| a * l).sum())
}
