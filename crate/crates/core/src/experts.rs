//! Expert heads, the general classifier, soft gating, and logit fusion.

use ndarray::{Array2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HistoError, Result};
use crate::nn::graph::softmax_in_place;
use crate::nn::layers::{init_linear, linear};
use crate::nn::{BoundParams, Graph, ParamStore, Tensor, Var};

pub const N_EXPERTS: usize = 3;
pub const HEAD_HIDDEN: usize = 256;
pub const SIMPLEX_TOL: f64 = 1e-6;

/// How per-sample weights over the heads are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRouting {
    /// Softmax gate over all heads.
    #[default]
    Gated,
    /// Hard routing: expert `magnification_ordinal mod K` gets weight one.
    Magnification,
}

/// `expert_0 .. expert_{k-1}, general`.
pub fn head_names(n_experts: usize) -> Vec<String> {
    (0..n_experts)
        .map(|k| format!("expert_{k}"))
        .chain(std::iter::once("general".to_string()))
        .collect()
}

pub fn init_experts<R: Rng>(store: &mut ParamStore, input_dim: usize, n_classes: usize, n_experts: usize, rng: &mut R) {
    for h in head_names(n_experts) {
        init_linear(store, &format!("{h}.fc1"), input_dim, HEAD_HIDDEN, 2.0, rng);
        init_linear(store, &format!("{h}.fc2"), HEAD_HIDDEN, n_classes, 1.0, rng);
    }
    init_linear(store, "gate", input_dim, n_experts + 1, 0.1, rng);
}

/// Inverted-dropout keep mask: entries are 0 or `1/(1−rate)`.
pub fn dropout_mask<R: Rng>(rng: &mut R, rows: usize, cols: usize, rate: f64) -> Tensor {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    let keep = 1.0 / (1.0 - rate);
    Tensor::from_shape_fn(IxDyn(&[rows, cols]), |_| if rng.random::<f64>() < rate { 0.0 } else { keep })
}

/// First layer of a head after ReLU and (optional) dropout: `N×256`.
pub fn head_hidden(g: &mut Graph, p: &BoundParams, head: &str, f: Var, mask: Option<&Tensor>) -> Var {
    let h = linear(g, p, &format!("{head}.fc1"), f);
    let h = g.relu(h);
    match mask {
        Some(m) => {
            let m = g.constant(m.clone());
            g.mul(h, m)
        }
        None => h,
    }
}

/// One head's `N×C` logits.
pub fn expert_forward(g: &mut Graph, p: &BoundParams, head: &str, f: Var, mask: Option<&Tensor>) -> Var {
    let h = head_hidden(g, p, head, f, mask);
    linear(g, p, &format!("{head}.fc2"), h)
}

/// Softmax gate, `N×(K+1)`.
pub fn gate_weights(g: &mut Graph, p: &BoundParams, f: Var) -> Var {
    let logits = linear(g, p, "gate", f);
    g.softmax(logits)
}

/// `Σ_k w_k · H_k` on the graph; `heads` are `N×C`, `weights` is `N×(K+1)`.
pub fn fuse_experts_graph(g: &mut Graph, heads: &[Var], weights: Var) -> Var {
    let s = g.shape(heads[0]).to_vec();
    let (n, c) = (s[0], s[1]);
    let stacked: Vec<Var> = heads.iter().map(|&h| g.reshape(h, &[n, 1, c])).collect();
    let stacked = g.concat(&stacked, 1);
    let w = g.reshape(weights, &[n, heads.len(), 1]);
    let weighted = g.mul(stacked, w);
    let summed = g.sum_axis(weighted, 1);
    g.reshape(summed, &[n, c])
}

/// Softmax of one logit vector.
pub fn softmax_weights(logits: &[f64]) -> Vec<f64> {
    let mut w = logits.to_vec();
    softmax_in_place(&mut w);
    w
}

pub fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| x < -SIMPLEX_TOL || !x.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(HistoError::invalid(format!("weights {w:?} are not on the simplex")));
    }
    Ok(())
}

/// `L_expert = Σ_k w_k H_k` for one sample.
pub fn fuse_experts(head_logits: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if head_logits.len() != weights.len() || head_logits.is_empty() {
        return Err(HistoError::invalid(format!(
            "{} heads but {} weights",
            head_logits.len(),
            weights.len()
        )));
    }
    check_simplex(weights)?;
    let c = head_logits[0].len();
    let mut out = vec![0.0; c];
    for (h, &w) in head_logits.iter().zip(weights) {
        if h.len() != c {
            return Err(HistoError::invalid("heads disagree on class count"));
        }
        for (o, &v) in out.iter_mut().zip(h) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `λ1·L_expert + λ2·L_proto`.
pub fn fuse_final(expert: &[f64], proto: &[f64], lambda1: f64, lambda2: f64) -> Vec<f64> {
    assert_eq!(expert.len(), proto.len());
    expert.iter().zip(proto).map(|(e, p)| lambda1 * e + lambda2 * p).collect()
}

/// Per-sample outputs of the gated classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedOutput {
    /// `(K+1)×C`.
    pub head_logits: Array2<f64>,
    pub gate_weights: Vec<f64>,
    pub expert_logits: Vec<f64>,
    pub proto_logits: Vec<f64>,
    pub final_logits: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::normal;
    use crate::rng::rng_for;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_and_peaked_gates() {
        assert_eq!(softmax_weights(&[0.0; 4]), vec![0.25; 4]);
        let w = softmax_weights(&[10.0, 0.0, 0.0, 0.0]);
        // Oracle: e^10 / (e^10 + 3) and 1 / (e^10 + 3).
        let z = 10f64.exp() + 3.0;
        assert_abs_diff_eq!(w[0], 10f64.exp() / z, epsilon = 1e-15);
        assert_abs_diff_eq!(w[0], 0.99986, epsilon = 5e-6);
        for &x in &w[1..] {
            assert_abs_diff_eq!(x, 1.0 / z, epsilon = 1e-15);
            assert_abs_diff_eq!(x, 4.5e-5, epsilon = 5e-7);
        }
    }

    #[test]
    fn fuse_examples() {
        let heads = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(fuse_experts(&heads, &[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        let heads = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        assert_eq!(fuse_experts(&heads, &[0.0, 1.0, 0.0]).unwrap(), heads[1]);
        let same = vec![vec![0.3, -1.2]; 4];
        let f = fuse_experts(&same, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_abs_diff_eq!(f[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], -1.2, epsilon = 1e-15);
        assert!(fuse_experts(&heads, &[0.5, 0.5, 0.1]).is_err());
    }

    #[test]
    fn final_fusion_examples() {
        assert_eq!(fuse_final(&[1.0, 2.0], &[3.0, 0.0], 1.0, 1.0), vec![4.0, 2.0]);
        assert_eq!(fuse_final(&[1.0, 2.0], &[3.0, 0.0], 0.0, 0.0), vec![0.0, 0.0]);
        assert_eq!(fuse_final(&[1.0, 2.0], &[3.0, 9.0], 0.7, 0.0), vec![0.7, 1.4]);
    }

    fn setup(d: usize) -> ParamStore {
        let mut store = ParamStore::new();
        init_experts(&mut store, d, 8, N_EXPERTS, &mut rng_for(1, &[]));
        store
    }

    #[test]
    fn deterministic_without_dropout_and_with_rate_zero() {
        let store = setup(12);
        let f0 = normal(&mut rng_for(2, &[]), &[3, 12], 1.0);
        let run = |mask: Option<&Tensor>| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let f = g.constant(f0.clone());
            let y = expert_forward(&mut g, &p, "expert_1", f, mask);
            g.value(y).clone()
        };
        let a = run(None);
        assert_eq!(a, run(None));
        let zero = dropout_mask(&mut rng_for(3, &[]), 3, HEAD_HIDDEN, 0.0);
        assert_eq!(a, run(Some(&zero)));
    }

    #[test]
    fn inverted_dropout_preserves_the_mean() {
        let store = setup(6);
        let f0 = normal(&mut rng_for(4, &[]), &[1, 6], 1.0);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(f0);
        let h = head_hidden(&mut g, &p, "general", f, None);
        let det = g.value(h).clone();
        let mut rng = rng_for(5, &[]);
        let trials = 10_000;
        // Track the summed activation so one 3-SE check covers the whole layer.
        let target: f64 = det.sum();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..trials {
            let m = dropout_mask(&mut rng, 1, HEAD_HIDDEN, 0.5);
            let y = (&det * &m).sum();
            sum += y;
            sum_sq += y * y;
        }
        let n = trials as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean).max(0.0) / n).sqrt();
        assert!((mean - target).abs() <= 3.0 * se, "mean {mean} vs {target} (se {se})");
    }

    #[test]
    fn graph_fusion_matches_scalar_fusion() {
        let store = setup(5);
        let f0 = normal(&mut rng_for(6, &[]), &[4, 5], 2.0);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(f0);
        let heads: Vec<Var> = head_names(N_EXPERTS)
            .iter()
            .map(|h| expert_forward(&mut g, &p, h, f, None))
            .collect();
        let w = gate_weights(&mut g, &p, f);
        let fused = fuse_experts_graph(&mut g, &heads, w);
        for i in 0..4 {
            let hl: Vec<Vec<f64>> = heads.iter().map(|&h| g.value(h).index_axis(ndarray::Axis(0), i).iter().copied().collect::<Vec<f64>>()).collect();
            let wi = g.value(w).index_axis(ndarray::Axis(0), i).iter().copied().collect::<Vec<f64>>();
            let expect = fuse_experts(&hl, &wi).unwrap();
            for (c, e) in expect.iter().enumerate() {
                assert_abs_diff_eq!(g.value(fused)[[i, c]], *e, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn gate_is_shift_invariant_and_on_simplex(
            logits in proptest::collection::vec(-50.0f64..50.0, 4),
            c in -100.0f64..100.0,
        ) {
            let w = softmax_weights(&logits);
            prop_assert!(check_simplex(&w).is_ok());
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            for (a, b) in w.iter().zip(softmax_weights(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn fused_logits_are_convex(
            heads in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 8), 4),
            raw in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let w: Vec<f64> = raw.iter().map(|r| (r + 1e-9 / 4.0) / total).collect();
            let f = fuse_experts(&heads, &w).unwrap();
            for c in 0..8 {
                let lo = heads.iter().map(|h| h[c]).fold(f64::INFINITY, f64::min);
                let hi = heads.iter().map(|h| h[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f[c] >= lo - 1e-9 && f[c] <= hi + 1e-9);
            }
        }

        #[test]
        fn argmax_survives_joint_scaling(
            e in proptest::collection::vec(-5.0f64..5.0, 8),
            pr in proptest::collection::vec(-2.0f64..0.0, 8),
            l1 in 0.01f64..2.0, l2 in 0.0f64..2.0, a in 0.01f64..50.0,
        ) {
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
            let base = fuse_final(&e, &pr, l1, l2);
            let scaled = fuse_final(&e, &pr, a * l1, a * l2);
            let (i, j) = (argmax(&base), argmax(&scaled));
            // Allow a different index only for exact numerical ties.
            prop_assert!(i == j || (base[i] - base[j]).abs() <= 1e-12 * base[i].abs().max(1.0));
        }
    }
}
