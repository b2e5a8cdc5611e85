//! DenseNet-201 topology: block depths 6/12/48/32, growth 32, bottleneck 4×.

use rand::Rng;

use crate::nn::infer::{avg_pool, concat_channels, max_pool, relu_inplace, BatchNorm2d, Conv2d, FeatureMap};

const GROWTH: usize = 32;
const BN_SIZE: usize = 4;
const BLOCKS: [usize; 4] = [6, 12, 48, 32];
const STEM: usize = 64;

#[derive(Clone, Debug)]
struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new<R: Rng>(rng: &mut R, in_ch: usize) -> Self {
        Self {
            bn1: BatchNorm2d::new(in_ch),
            conv1: Conv2d::new(rng, in_ch, BN_SIZE * GROWTH, 1, 1, 0, 1, false),
            bn2: BatchNorm2d::new(BN_SIZE * GROWTH),
            conv2: Conv2d::new(rng, BN_SIZE * GROWTH, GROWTH, 3, 1, 1, 1, false),
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = x.clone();
        self.bn1.forward_inplace(&mut h);
        relu_inplace(&mut h);
        let mut h = self.conv1.forward(&h);
        self.bn2.forward_inplace(&mut h);
        relu_inplace(&mut h);
        self.conv2.forward(&h)
    }
}

#[derive(Clone, Debug)]
struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DenseNet201 {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
}

impl DenseNet201 {
    pub const FEATURE_DIM: usize = 1920;

    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut ch = STEM;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &depth) in BLOCKS.iter().enumerate() {
            let layers = (0..depth).map(|l| DenseLayer::new(rng, ch + l * GROWTH)).collect();
            blocks.push(layers);
            ch += depth * GROWTH;
            if i + 1 < BLOCKS.len() {
                transitions.push(Transition {
                    bn: BatchNorm2d::new(ch),
                    conv: Conv2d::new(rng, ch, ch / 2, 1, 1, 0, 1, false),
                });
                ch /= 2;
            }
        }
        debug_assert_eq!(ch, Self::FEATURE_DIM);
        Self {
            stem: Conv2d::new(rng, 3, STEM, 7, 2, 3, 1, false),
            stem_bn: BatchNorm2d::new(STEM),
            blocks,
            transitions,
            final_bn: BatchNorm2d::new(ch),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.stem.forward(x);
        self.stem_bn.forward_inplace(&mut h);
        relu_inplace(&mut h);
        let mut h = max_pool(&h, 3, 2, 1);
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let new = layer.forward(&h);
                h = concat_channels(&[&h, &new]);
            }
            if let Some(t) = self.transitions.get(i) {
                t.bn.forward_inplace(&mut h);
                relu_inplace(&mut h);
                h = avg_pool(&t.conv.forward(&h), 2, 2);
            }
        }
        self.final_bn.forward_inplace(&mut h);
        relu_inplace(&mut h);
        h
    }
}
