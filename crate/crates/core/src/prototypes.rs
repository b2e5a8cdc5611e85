//! Learnable class prototypes in `f_global` space: distance logits and the
//! push-pull objective.

use log::warn;
use ndarray::{Array2, Array3, ArrayView1, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HistoError, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::rng::rng_for;

pub const NORM_EPS: f64 = 1e-12;
/// Added under the square root on the graph so the gradient stays finite at zero distance.
pub const DIST_EPS: f64 = 1e-24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoInit {
    RandomUnit,
    #[default]
    KmeansPerClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `C×J×D`.
    pub prototypes: Array3<f64>,
    pub margin: f64,
    pub push_weight: f64,
}

impl PrototypeBank {
    pub fn new(prototypes: Array3<f64>, margin: f64, push_weight: f64) -> Result<Self> {
        let bank = Self {
            prototypes,
            margin,
            push_weight,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.push_weight >= 0.0) {
            return Err(HistoError::invalid("prototype margin must be > 0 and push weight >= 0"));
        }
        if self.prototypes.iter().any(|v| !v.is_finite()) {
            return Err(HistoError::invalid("prototype bank contains non-finite values"));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.dim().0
    }

    /// `C·J×D` view used by the graph (row `c·J + j`).
    pub fn flat(&self) -> Tensor {
        let (c, j, d) = self.prototypes.dim();
        self.prototypes.clone().into_shape_with_order((c * j, d)).unwrap().into_dyn()
    }

    pub fn from_flat(flat: &Tensor, n_classes: usize, margin: f64, push_weight: f64) -> Result<Self> {
        let s = flat.shape();
        if s.len() != 2 || s[0] % n_classes != 0 {
            return Err(HistoError::invalid(format!("prototype tensor shape {s:?} incompatible with {n_classes} classes")));
        }
        let j = s[0] / n_classes;
        let arr = flat
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n_classes, j, s[1]))
            .map_err(|e| HistoError::invalid(e.to_string()))?;
        Self::new(arr, margin, push_weight)
    }
}

fn unit(v: ArrayView1<f64>) -> Vec<f64> {
    let n = v.dot(&v).sqrt().max(NORM_EPS);
    v.iter().map(|x| x / n).collect()
}

/// `‖f/‖f‖ − p/‖p‖‖₂`, in `[0, 2]`.
pub fn proto_distance(f: &[f64], p: &[f64]) -> f64 {
    assert_eq!(f.len(), p.len());
    let fu = unit(ArrayView1::from(f));
    let pu = unit(ArrayView1::from(p));
    fu.iter().zip(&pu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt().min(2.0)
}

/// `D_c = min_j d(f, p_{c,j})` for every class.
pub fn class_distances(f: &[f64], bank: &PrototypeBank) -> Vec<f64> {
    bank.prototypes
        .outer_iter()
        .map(|class| {
            class
                .outer_iter()
                .map(|p| proto_distance(f, p.as_slice().unwrap_or(&p.to_vec())))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `−D_c` per class; every entry lies in `[−2, 0]`.
pub fn proto_logits(f: &[f64], bank: &PrototypeBank) -> Vec<f64> {
    class_distances(f, bank).into_iter().map(|d| -d).collect()
}

/// `D_y + β·max(0, α + D_y − min_{c≠y} D_c)`.
pub fn proto_loss(f: &[f64], y: usize, bank: &PrototypeBank) -> Result<f64> {
    let d = class_distances(f, bank);
    push_pull(&d, y, bank.margin, bank.push_weight)
}

/// The push-pull objective from precomputed class distances.
pub fn push_pull(d: &[f64], y: usize, margin: f64, push_weight: f64) -> Result<f64> {
    if d.len() < 2 {
        return Err(HistoError::invalid("prototype loss needs at least two classes"));
    }
    if y >= d.len() {
        return Err(HistoError::invalid(format!("label {y} out of range")));
    }
    let other = d
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    Ok(d[y] + push_weight * (margin + d[y] - other).max(0.0))
}

/// Graph version: `f` is `N×D`, `flat` is `C·J×D`. Returns `D` as `N×C`.
pub fn class_distances_graph(g: &mut Graph, f: Var, flat: Var, n_classes: usize) -> Var {
    let n = g.shape(f)[0];
    let cj = g.shape(flat)[0];
    let fu = g.l2_normalize_rows(f, NORM_EPS);
    let pu = g.l2_normalize_rows(flat, NORM_EPS);
    let d = g.pairwise_distance(fu, pu, DIST_EPS);
    let d = g.reshape(d, &[n, n_classes, cj / n_classes]);
    let m = g.min_axis(d, 2);
    g.reshape(m, &[n, n_classes])
}

/// Batch mean of the push-pull loss given `N×C` class distances.
pub fn proto_loss_graph(g: &mut Graph, dist: Var, labels: &[usize], margin: f64, push_weight: f64) -> Result<Var> {
    let s = g.shape(dist).to_vec();
    let (n, c) = (s[0], s[1]);
    if c < 2 {
        return Err(HistoError::invalid("prototype loss needs at least two classes"));
    }
    if labels.len() != n || n == 0 {
        return Err(HistoError::invalid("labels must match a non-empty batch"));
    }
    let d_y = g.gather_rows(dist, labels);
    // Distances lie in [0, 2]; lifting the own-class column by 4 excludes it from the min.
    let mut lift = Tensor::zeros(IxDyn(&[n, c]));
    for (i, &y) in labels.iter().enumerate() {
        lift[[i, y]] = 4.0;
    }
    let lift = g.constant(lift);
    let masked = g.add(dist, lift);
    let other = g.min_axis(masked, 1);
    let other = g.reshape(other, &[n]);
    let gap = g.sub(d_y, other);
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    let per = g.weighted_sum(&[(1.0, d_y), (push_weight, hinge)]);
    Ok(g.mean(per))
}

/// i.i.d. Gaussian rows scaled to unit norm, `C×J×D`.
pub fn init_random_unit<R: Rng>(rng: &mut R, n_classes: usize, j: usize, dim: usize) -> Array3<f64> {
    let mut arr = Array3::from_shape_fn((n_classes, j, dim), |_| -> f64 { StandardNormal.sample(rng) });
    for mut row in arr.lanes_mut(Axis(2)) {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row /= n;
    }
    arr
}

/// Lloyd's algorithm with k-means++ seeding. Returns `k×D` centroids.
pub fn kmeans<R: Rng>(points: &Array2<f64>, k: usize, rng: &mut R, max_iter: usize) -> Array2<f64> {
    let (n, d) = points.dim();
    assert!(k >= 1 && n >= k, "k-means needs at least k points");
    let sq = |a: ArrayView1<f64>, b: ArrayView1<f64>| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    for c in 1..k {
        let dist: Vec<f64> = (0..n)
            .map(|i| (0..c).map(|j| sq(points.row(i), centroids.row(j))).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .map(|j| (j, sq(points.row(i), centroids.row(j))))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        for j in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = ndarray::Array1::<f64>::zeros(d);
            for &i in &members {
                mean += &points.row(i);
            }
            mean /= members.len() as f64;
            centroids.row_mut(j).assign(&mean);
        }
        if !changed {
            break;
        }
    }
    centroids
}

/// Per-class k-means over training features, unit-normalized. Classes with
/// fewer than `j` samples fall back to random unit rows.
pub fn init_kmeans_per_class(
    features: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    j: usize,
    seed: u64,
) -> (Array3<f64>, Vec<String>) {
    let d = features.ncols();
    let mut out = Array3::<f64>::zeros((n_classes, j, d));
    let mut warnings = Vec::new();
    for c in 0..n_classes {
        let mut rng = rng_for(seed, &[0x9e0, c as u64]);
        let mut rows: Vec<usize> = labels.iter().enumerate().filter(|&(_, &y)| y == c).map(|(i, _)| i).collect();
        if rows.len() < j {
            let msg = format!("class {c} has {} training samples < {j} prototypes; random init", rows.len());
            warn!("{msg}");
            warnings.push(msg);
            out.index_axis_mut(Axis(0), c).assign(&init_random_unit(&mut rng, 1, j, d).index_axis(Axis(0), 0));
            continue;
        }
        rows.shuffle(&mut rng);
        let pts = features.select(Axis(0), &rows);
        let cents = kmeans(&pts, j, &mut rng, 100);
        for (k, row) in cents.outer_iter().enumerate() {
            let u = unit(row);
            out.index_axis_mut(Axis(0), c).row_mut(k).assign(&ndarray::Array1::from(u));
        }
    }
    (out, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn bank(protos: Vec<Vec<Vec<f64>>>) -> PrototypeBank {
        let (c, j, d) = (protos.len(), protos[0].len(), protos[0][0].len());
        let flat: Vec<f64> = protos.into_iter().flatten().flatten().collect();
        PrototypeBank::new(Array3::from_shape_vec((c, j, d), flat).unwrap(), 0.5, 1.0).unwrap()
    }

    #[test]
    fn distance_examples() {
        let p = [0.3, -1.2, 2.0];
        assert_eq!(proto_distance(&p, &p), 0.0);
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(proto_distance(&p, &neg), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(proto_distance(&[1.0, 0.0], &[0.0, 1.0]), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn logit_examples() {
        let b = bank(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![-1.0, 0.0], vec![0.0, -1.0]]]);
        let l = proto_logits(&[0.0, 2.0], &b);
        assert_eq!(l[0], 0.0);

        // Class with two prototypes at distances 0.3 and 0.9 from f = e_x.
        let at = |d: f64| {
            // A unit vector at chord distance d from e_x.
            let cos = 1.0 - d * d / 2.0;
            vec![cos, (1.0 - cos * cos).sqrt()]
        };
        let b = bank(vec![vec![at(0.3), at(0.9)], vec![at(1.5), at(1.8)]]);
        assert_abs_diff_eq!(proto_logits(&[1.0, 0.0], &b)[0], -0.3, epsilon = 1e-12);

        let same = bank(vec![vec![vec![0.2, 0.7]]; 3]);
        let l = proto_logits(&[1.0, -3.0], &same);
        assert!(l.iter().all(|&v| v == l[0]));
    }

    #[test]
    fn loss_examples() {
        assert_abs_diff_eq!(push_pull(&[0.5, 0.6], 0, 0.3, 1.0).unwrap(), 0.7, epsilon = 1e-12);
        assert_eq!(push_pull(&[0.0, 0.8, 1.0], 0, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(push_pull(&[0.4, 0.1], 0, 0.5, 0.0).unwrap(), 0.4);
        assert!(push_pull(&[0.4], 0, 0.5, 1.0).is_err());
    }

    #[test]
    fn graph_matches_scalar_path() {
        let mut rng = rng_for(3, &[]);
        let b = PrototypeBank::new(init_random_unit(&mut rng, 4, 3, 6), 0.5, 1.0).unwrap();
        let f0 = crate::nn::layers::normal(&mut rng, &[5, 6], 1.0);
        let labels = [0, 3, 2, 1, 1];
        let mut g = Graph::new();
        let f = g.constant(f0.clone());
        let p = g.constant(b.flat());
        let d = class_distances_graph(&mut g, f, p, 4);
        let loss = proto_loss_graph(&mut g, d, &labels, b.margin, b.push_weight).unwrap();
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = f0.index_axis(Axis(0), i).iter().copied().collect();
            let dist = class_distances(&row, &b);
            for c in 0..4 {
                assert_abs_diff_eq!(g.value(d)[[i, c]], dist[c], epsilon = 1e-10);
            }
            expect += proto_loss(&row, y, &b).unwrap() / labels.len() as f64;
        }
        assert_abs_diff_eq!(g.item(loss), expect, epsilon = 1e-10);
    }

    #[test]
    fn inactive_hinge_has_zero_gradient_wrt_other_class() {
        // D_y small, others far: the hinge is off, so the far prototypes get no gradient.
        let mut g = Graph::new();
        let d = g.param(Tensor::from_shape_vec(IxDyn(&[1, 3]), vec![0.1, 1.5, 1.9]).unwrap());
        let loss = proto_loss_graph(&mut g, d, &[0], 0.5, 1.0).unwrap();
        let grads = g.backward(loss);
        let gd = grads.get(d).unwrap();
        assert_eq!(gd[[0, 1]], 0.0);
        assert_eq!(gd[[0, 2]], 0.0);
        assert_eq!(gd[[0, 0]], 1.0);
        // Finite differences agree.
        let h = 1e-6;
        let eval = |v: f64| push_pull(&[0.1, v, 1.9], 0, 0.5, 1.0).unwrap();
        assert_eq!((eval(1.5 + h) - eval(1.5 - h)) / (2.0 * h), 0.0);
    }

    #[test]
    fn pure_pull_step_decreases_own_distance() {
        let mut rng = rng_for(8, &[]);
        let b = PrototypeBank::new(init_random_unit(&mut rng, 3, 2, 5), 0.5, 0.0).unwrap();
        let f0 = crate::nn::layers::normal(&mut rng, &[1, 5], 1.0);
        let y = 2;
        let eval = |flat: &Tensor| {
            let mut g = Graph::new();
            let f = g.constant(f0.clone());
            let p = g.param(flat.clone());
            let d = class_distances_graph(&mut g, f, p, 3);
            let loss = proto_loss_graph(&mut g, d, &[y], 0.5, 0.0).unwrap();
            let grads = g.backward(loss);
            (g.item(loss), grads.get(p).unwrap().clone())
        };
        let flat = b.flat();
        let (before, grad) = eval(&flat);
        let stepped = &flat - &(&grad * 1e-3);
        let (after, _) = eval(&stepped);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn random_unit_rows_are_unit_and_reproducible() {
        let a = init_random_unit(&mut rng_for(1, &[]), 8, 3, 10);
        let b = init_random_unit(&mut rng_for(1, &[]), 8, 3, 10);
        assert_eq!(a, b);
        for row in a.lanes(Axis(2)) {
            assert_abs_diff_eq!(row.dot(&row), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_prototype_is_normalized_class_mean() {
        let feats = Array2::from_shape_vec((4, 2), vec![1.0, 2.0, 3.0, 2.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        let (bank, warnings) = init_kmeans_per_class(&feats, &[0, 0, 1, 1], 2, 1, 3);
        assert!(warnings.is_empty());
        let m = [2.0, 2.0];
        let n = (8.0f64).sqrt();
        assert_abs_diff_eq!(bank[[0, 0, 0]], m[0] / n, epsilon = 1e-12);
        assert_abs_diff_eq!(bank[[0, 0, 1]], m[1] / n, epsilon = 1e-12);
    }

    #[test]
    fn short_class_falls_back_to_random() {
        let feats = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 2.0, 5.0, 5.0]).unwrap();
        let (bank, warnings) = init_kmeans_per_class(&feats, &[0, 0, 1], 2, 2, 3);
        assert_eq!(warnings.len(), 1);
        assert!(bank.iter().all(|v| v.is_finite()));
    }

    /// Exhaustive two-way partition of a small point set minimizing within-cluster SSE.
    fn brute_force_two_means(pts: &Array2<f64>) -> [Vec<f64>; 2] {
        let n = pts.nrows();
        let mut best = (f64::INFINITY, [vec![], vec![]]);
        for mask in 1..(1u32 << n) - 1 {
            let mut sums = [vec![0.0; 2], vec![0.0; 2]];
            let mut counts = [0.0; 2];
            for i in 0..n {
                let side = ((mask >> i) & 1) as usize;
                counts[side] += 1.0;
                for k in 0..2 {
                    sums[side][k] += pts[[i, k]];
                }
            }
            let means = [
                vec![sums[0][0] / counts[0], sums[0][1] / counts[0]],
                vec![sums[1][0] / counts[1], sums[1][1] / counts[1]],
            ];
            let mut sse = 0.0;
            for i in 0..n {
                let side = ((mask >> i) & 1) as usize;
                sse += (pts[[i, 0]] - means[side][0]).powi(2) + (pts[[i, 1]] - means[side][1]).powi(2);
            }
            if sse < best.0 {
                best = (sse, means);
            }
        }
        best.1
    }

    #[test]
    fn kmeans_recovers_separated_subclusters() {
        for seed in 0..10u64 {
            let mut rng = rng_for(seed, &[77]);
            let mut pts = Vec::new();
            for _ in 0..5 {
                pts.extend([rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
            }
            for _ in 0..5 {
                pts.extend([10.0 + rng.random_range(0.0..1.0), 10.0 + rng.random_range(0.0..1.0)]);
            }
            let pts = Array2::from_shape_vec((10, 2), pts).unwrap();
            let cents = kmeans(&pts, 2, &mut rng, 100);
            let oracle = brute_force_two_means(&pts);
            for c in cents.outer_iter() {
                let matched = oracle
                    .iter()
                    .any(|o| (o[0] - c[0]).abs() < 1e-9 && (o[1] - c[1]).abs() < 1e-9);
                assert!(matched, "centroid {c:?} vs oracle {oracle:?}");
                // Inside the hull (bounding box) of one sub-cluster.
                let low = c[0] < 1.0 && c[1] < 1.0 && c[0] > 0.0 && c[1] > 0.0;
                let high = c[0] > 10.0 && c[1] > 10.0 && c[0] < 11.0 && c[1] < 11.0;
                assert!(low || high);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn distance_is_scale_invariant_and_logits_bounded(
            f in proptest::collection::vec(-5.0f64..5.0, 6),
            a in 0.01f64..100.0,
            seed in any::<u64>(),
        ) {
            prop_assume!(f.iter().any(|v| v.abs() > 1e-3));
            let b = PrototypeBank::new(init_random_unit(&mut rng_for(seed, &[]), 4, 2, 6), 0.5, 1.0).unwrap();
            let scaled: Vec<f64> = f.iter().map(|v| v * a).collect();
            let p = b.prototypes.index_axis(Axis(0), 0).row(0).to_vec();
            prop_assert!((proto_distance(&f, &p) - proto_distance(&scaled, &p)).abs() < 1e-12);
            for l in proto_logits(&f, &b) {
                prop_assert!((-2.0..=0.0).contains(&l));
            }
            for y in 0..4 {
                prop_assert!(proto_loss(&f, y, &b).unwrap() >= 0.0);
            }
        }
    }
}
