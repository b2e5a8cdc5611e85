//! EfficientNetV2-S topology: three Fused-MBConv stages, three MBConv stages
//! with squeeze-excitation, and a 1×1 head to 1280 channels.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::infer::{global_avg_pool, silu_inplace, BatchNorm2d, Conv2d, FeatureMap};

#[derive(Clone, Copy)]
struct StageDef {
    fused: bool,
    expand: usize,
    stride: usize,
    out: usize,
    layers: usize,
}

const STAGES: [StageDef; 6] = [
    StageDef { fused: true, expand: 1, stride: 1, out: 24, layers: 2 },
    StageDef { fused: true, expand: 4, stride: 2, out: 48, layers: 4 },
    StageDef { fused: true, expand: 4, stride: 2, out: 64, layers: 4 },
    StageDef { fused: false, expand: 4, stride: 2, out: 128, layers: 6 },
    StageDef { fused: false, expand: 6, stride: 1, out: 160, layers: 9 },
    StageDef { fused: false, expand: 6, stride: 2, out: 256, layers: 15 },
];
const STEM: usize = 24;

fn dense<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f32> {
    let std = (2.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    reduce: Array2<f32>,
    expand: Array2<f32>,
}

impl SqueezeExcite {
    fn forward(&self, x: &mut FeatureMap) {
        let pooled = ndarray::Array1::from(global_avg_pool(x));
        let mut s = self.reduce.dot(&pooled);
        s.mapv_inplace(|v| v / (1.0 + (-v).exp()));
        let gate = self.expand.dot(&s).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        for (mut plane, &g) in x.outer_iter_mut().zip(gate.iter()) {
            plane *= g;
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(rng: &mut R, i: usize, o: usize, k: usize, s: usize, groups: usize, act: bool) -> Self {
        Self {
            conv: Conv2d::new(rng, i, o, k, s, k / 2, groups, false),
            bn: BatchNorm2d::new(o),
            act,
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.conv.forward(x);
        self.bn.forward_inplace(&mut h);
        if self.act {
            silu_inplace(&mut h);
        }
        h
    }
}

#[derive(Clone, Debug)]
struct MbBlock {
    layers: Vec<ConvBn>,
    se: Option<(usize, SqueezeExcite)>,
    residual: bool,
}

impl MbBlock {
    fn new<R: Rng>(rng: &mut R, def: StageDef, in_ch: usize, stride: usize) -> Self {
        let mid = in_ch * def.expand;
        let mut layers = Vec::new();
        let mut se = None;
        if def.fused {
            if def.expand == 1 {
                layers.push(ConvBn::new(rng, in_ch, def.out, 3, stride, 1, true));
            } else {
                layers.push(ConvBn::new(rng, in_ch, mid, 3, stride, 1, true));
                layers.push(ConvBn::new(rng, mid, def.out, 1, 1, 1, false));
            }
        } else {
            layers.push(ConvBn::new(rng, in_ch, mid, 1, 1, 1, true));
            layers.push(ConvBn::new(rng, mid, mid, 3, stride, mid, true));
            let squeeze = (in_ch / 4).max(1);
            se = Some((
                2,
                SqueezeExcite {
                    reduce: dense(rng, squeeze, mid),
                    expand: dense(rng, mid, squeeze),
                },
            ));
            layers.push(ConvBn::new(rng, mid, def.out, 1, 1, 1, false));
        }
        Self {
            layers,
            se,
            residual: stride == 1 && in_ch == def.out,
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((at, se)) = &self.se {
                if *at == i {
                    se.forward(&mut h);
                }
            }
            h = layer.forward(&h);
        }
        if self.residual {
            h += x;
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct EfficientNetV2S {
    stem: ConvBn,
    blocks: Vec<MbBlock>,
    head: ConvBn,
}

impl EfficientNetV2S {
    pub const FEATURE_DIM: usize = 1280;

    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let stem = ConvBn::new(rng, 3, STEM, 3, 2, 1, true);
        let mut blocks = Vec::new();
        let mut ch = STEM;
        for def in STAGES {
            for l in 0..def.layers {
                let stride = if l == 0 { def.stride } else { 1 };
                blocks.push(MbBlock::new(rng, def, ch, stride));
                ch = def.out;
            }
        }
        let head = ConvBn::new(rng, ch, Self::FEATURE_DIM, 1, 1, 1, true);
        Self { stem, blocks, head }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.stem.forward(x);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        self.head.forward(&h)
    }
}
