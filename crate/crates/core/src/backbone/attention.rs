//! Sequential channel-then-spatial attention on the autograd graph.
//!
//! Channel gate: shared two-layer MLP (reduction 16) over average- and
//! max-pooled descriptors, summed, then a sigmoid. Spatial gate: 7×7
//! convolution over the channel-wise mean and max maps, then a sigmoid.

use ndarray::IxDyn;
use rand::Rng;

use crate::nn::layers::{init_linear, linear, normal};
use crate::nn::{BoundParams, Graph, ParamStore, Tensor, Var};

pub const REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    /// Both gates pinned to 1; the refined map equals the input.
    Ones,
}

pub struct Refined {
    pub map: Var,
    /// `N×C×1×1`.
    pub channel_gate: Var,
    /// Spatial mask, `N×1×h×w`, values in `[0, 1]`.
    pub mask: Var,
}

pub fn hidden_width(channels: usize) -> usize {
    (channels / REDUCTION).max(1)
}

pub fn init_attention<R: Rng>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) {
    let hidden = hidden_width(channels);
    init_linear(store, &format!("{prefix}.mlp1"), channels, hidden, 2.0, rng);
    init_linear(store, &format!("{prefix}.mlp2"), hidden, channels, 1.0, rng);
    let fan_in = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL;
    store.insert(
        format!("{prefix}.spatial.weight"),
        normal(rng, &[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], (1.0 / fan_in as f64).sqrt()),
    );
    store.insert(format!("{prefix}.spatial.bias"), Tensor::zeros(IxDyn(&[1])));
}

/// Per-position channel pooling helper: `N×C×H×W` → `N×C` via `op` over `H·W`.
fn pool_channels(g: &mut Graph, x: Var, max: bool) -> Var {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
    let pooled = if max { g.max_axis(flat, 2) } else { g.mean_axis(flat, 2) };
    g.reshape(pooled, &[s[0], s[1]])
}

/// Refines an `N×C×h×w` map: `map ⊙ channel_gate ⊙ spatial_gate`.
pub fn refine_attention(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, mode: GateMode) -> Refined {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if mode == GateMode::Ones {
        let channel_gate = g.constant(Tensor::ones(IxDyn(&[n, c, 1, 1])));
        let mask = g.constant(Tensor::ones(IxDyn(&[n, 1, h, w])));
        let x1 = g.mul(x, channel_gate);
        let map = g.mul(x1, mask);
        return Refined { map, channel_gate, mask };
    }

    let avg = pool_channels(g, x, false);
    let mx = pool_channels(g, x, true);
    let mlp = |g: &mut Graph, v: Var| {
        let hdn = linear(g, p, &format!("{prefix}.mlp1"), v);
        let hdn = g.relu(hdn);
        linear(g, p, &format!("{prefix}.mlp2"), hdn)
    };
    let a = mlp(g, avg);
    let m = mlp(g, mx);
    let logits = g.add(a, m);
    let gate = g.sigmoid(logits);
    let channel_gate = g.reshape(gate, &[n, c, 1, 1]);
    let x1 = g.mul(x, channel_gate);

    let mean_c = g.mean_axis(x1, 1);
    let max_c = g.max_axis(x1, 1);
    let stats = g.concat(&[mean_c, max_c], 1);
    let conv = g.conv2d_same(
        stats,
        p.var(&format!("{prefix}.spatial.weight")),
        p.var(&format!("{prefix}.spatial.bias")),
    );
    let mask = g.sigmoid(conv);
    let map = g.mul(x1, mask);
    Refined { map, channel_gate, mask }
}

/// `N×C×h×w` → `N×C`.
pub fn global_average_pool(g: &mut Graph, map: Var) -> Var {
    pool_channels(g, map, false)
}

/// Concatenation of per-backbone pooled vectors, in the given (registry) order.
pub fn fuse_global(g: &mut Graph, maps: &[Var]) -> Var {
    assert!(!maps.is_empty(), "fuse_global needs at least one map");
    let pooled: Vec<Var> = maps.iter().map(|&m| global_average_pool(g, m)).collect();
    if pooled.len() == 1 {
        pooled[0]
    } else {
        g.concat(&pooled, 1)
    }
}
