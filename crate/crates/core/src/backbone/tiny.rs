use rand::Rng;

use crate::nn::infer::{max_pool, relu_inplace, Conv2d, FeatureMap};

/// Three stride-2 conv blocks (16, 32, `dim` channels). The first two blocks
/// end in 2×2 max pooling, so a 224 input yields a 7×7 map.
#[derive(Clone, Debug)]
pub struct TinyNet {
    convs: [Conv2d; 3],
}

impl TinyNet {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            convs: [
                Conv2d::new(rng, 3, 16, 3, 2, 1, 1, true),
                Conv2d::new(rng, 16, 32, 3, 2, 1, 1, true),
                Conv2d::new(rng, 32, dim, 3, 2, 1, 1, true),
            ],
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h);
            relu_inplace(&mut h);
            if i < 2 {
                h = max_pool(&h, 2, 2, 0);
            }
        }
        h
    }
}
