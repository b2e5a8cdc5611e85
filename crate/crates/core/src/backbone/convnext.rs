//! ConvNeXt-T topology: depths 3/3/9/3, widths 96/192/384/768.

use rand::Rng;

use crate::nn::infer::{gelu_inplace, ChannelLayerNorm, Conv2d, FeatureMap};

const DEPTHS: [usize; 4] = [3, 3, 9, 3];
const DIMS: [usize; 4] = [96, 192, 384, 768];
const LAYER_SCALE: f32 = 1e-6;

#[derive(Clone, Debug)]
struct Block {
    dw: Conv2d,
    norm: ChannelLayerNorm,
    pw1: Conv2d,
    pw2: Conv2d,
}

impl Block {
    fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            dw: Conv2d::new(rng, dim, dim, 7, 1, 3, dim, true),
            norm: ChannelLayerNorm::new(dim),
            pw1: Conv2d::new(rng, dim, 4 * dim, 1, 1, 0, 1, true),
            pw2: Conv2d::new(rng, 4 * dim, dim, 1, 1, 0, 1, true),
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.dw.forward(x);
        self.norm.forward_inplace(&mut h);
        let mut h = self.pw1.forward(&h);
        gelu_inplace(&mut h);
        let h = self.pw2.forward(&h);
        x + &(h * LAYER_SCALE)
    }
}

#[derive(Clone, Debug)]
struct Downsample {
    norm: ChannelLayerNorm,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct ConvNextTiny {
    stem: Conv2d,
    stem_norm: ChannelLayerNorm,
    downsamples: Vec<Downsample>,
    stages: Vec<Vec<Block>>,
    final_norm: ChannelLayerNorm,
}

impl ConvNextTiny {
    pub const FEATURE_DIM: usize = 768;

    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let stem = Conv2d::new(rng, 3, DIMS[0], 4, 4, 0, 1, true);
        let mut downsamples = Vec::new();
        let mut stages = Vec::new();
        for (i, (&depth, &dim)) in DEPTHS.iter().zip(&DIMS).enumerate() {
            if i > 0 {
                downsamples.push(Downsample {
                    norm: ChannelLayerNorm::new(DIMS[i - 1]),
                    conv: Conv2d::new(rng, DIMS[i - 1], dim, 2, 2, 0, 1, true),
                });
            }
            stages.push((0..depth).map(|_| Block::new(rng, dim)).collect());
        }
        Self {
            stem,
            stem_norm: ChannelLayerNorm::new(DIMS[0]),
            downsamples,
            stages,
            final_norm: ChannelLayerNorm::new(Self::FEATURE_DIM),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.stem.forward(x);
        self.stem_norm.forward_inplace(&mut h);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let d = &self.downsamples[i - 1];
                d.norm.forward_inplace(&mut h);
                h = d.conv.forward(&h);
            }
            for block in stage {
                h = block.forward(&h);
            }
        }
        self.final_norm.forward_inplace(&mut h);
        h
    }
}
