//! Two-layer projection of `f_global` onto the unit sphere in 128 dimensions.

use rand::Rng;

use crate::nn::layers::{init_linear, linear};
use crate::nn::{BoundParams, Graph, ParamStore, Var};

pub const PROJ_HIDDEN: usize = 512;
pub const EMBED_DIM: usize = 128;
/// Floor on the pre-normalization norm.
pub const NORM_EPS: f64 = 1e-12;

pub fn init_projection<R: Rng>(store: &mut ParamStore, input_dim: usize, rng: &mut R) {
    init_linear(store, "proj.fc1", input_dim, PROJ_HIDDEN, 2.0, rng);
    init_linear(store, "proj.fc2", PROJ_HIDDEN, EMBED_DIM, 1.0, rng);
}

/// `N×D` → `N×128`, every row of unit norm.
pub fn project_embedding(g: &mut Graph, p: &BoundParams, f_global: Var) -> Var {
    let h = linear(g, p, "proj.fc1", f_global);
    let h = g.relu(h);
    let z = linear(g, p, "proj.fc2", h);
    g.l2_normalize_rows(z, NORM_EPS)
}
