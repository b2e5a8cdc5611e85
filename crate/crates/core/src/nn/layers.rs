//! Parameter initialization and small graph building blocks.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BoundParams, Graph, ParamStore, Tensor, Var};

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Registers `{name}.weight` (`in×out`, He-normal scaled by `gain`) and a zero `{name}.bias`.
pub fn init_linear<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) {
    let std = (gain / fan_in as f64).sqrt();
    store.insert(format!("{name}.weight"), normal(rng, &[fan_in, fan_out], std));
    store.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[fan_out])));
}

/// `x · W + b` for `x` of shape `N×in`.
pub fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let b = p.var(&format!("{name}.bias"));
    let y = g.matmul(x, w);
    g.add(y, b)
}
