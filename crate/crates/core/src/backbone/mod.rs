//! Frozen feature extractors, channel+spatial attention refinement, global
//! fusion and the contrastive projection head.
//!
//! Extractors run forward-only in `f32` with seeded random weights. Everything
//! downstream of the raw maps is trainable and lives on the autograd graph.

use std::fmt;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HistoError, Result};
use crate::nn::infer::FeatureMap;
use crate::rng::{hash_str, rng_for};

pub mod attention;
pub mod cache;
pub mod projection;
mod convnext;
mod densenet;
mod efficientnet;
mod tiny;

pub use attention::{fuse_global, global_average_pool, init_attention, refine_attention, GateMode, Refined};
pub use cache::{FeatureCache, Transform};
pub use projection::{init_projection, project_embedding, EMBED_DIM};

pub use convnext::ConvNextTiny;
pub use densenet::DenseNet201;
pub use efficientnet::EfficientNetV2S;
pub use tiny::TinyNet;

pub const TINY_DEFAULT_DIM: usize = 64;

/// Registry order; `f_global` concatenates active backbones in this order.
pub const REGISTRY: [&str; 4] = ["densenet201", "convnext_tiny", "efficientnetv2_s", "tiny_test"];

pub const FULL_BACKBONES: [&str; 3] = ["densenet201", "convnext_tiny", "efficientnetv2_s"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub feature_dim: usize,
    pub pretrained: bool,
}

fn registry_listing() -> String {
    REGISTRY.join(", ")
}

pub fn backbone_spec(name: &str, tiny_dim: usize) -> Result<BackboneSpec> {
    let feature_dim = match name {
        "densenet201" => DenseNet201::FEATURE_DIM,
        "convnext_tiny" => ConvNextTiny::FEATURE_DIM,
        "efficientnetv2_s" => EfficientNetV2S::FEATURE_DIM,
        "tiny_test" => {
            if tiny_dim == 0 {
                return Err(HistoError::Config("tiny_test dimension must be positive".into()));
            }
            tiny_dim
        }
        _ => {
            return Err(HistoError::UnknownBackbone {
                name: name.to_string(),
                registry: registry_listing(),
            })
        }
    };
    Ok(BackboneSpec {
        name: name.to_string(),
        feature_dim,
        pretrained: false,
    })
}

/// Validates `names` and returns them in registry order without duplicates.
pub fn registry_order(names: &[String]) -> Result<Vec<String>> {
    if names.is_empty() {
        return Err(HistoError::Config("at least one backbone is required".into()));
    }
    for n in names {
        backbone_spec(n, 1)?;
    }
    Ok(REGISTRY
        .iter()
        .filter(|r| names.iter().any(|n| n == *r))
        .map(|r| r.to_string())
        .collect())
}

#[derive(Clone, Debug)]
enum Net {
    Tiny(TinyNet),
    DenseNet(Box<DenseNet201>),
    ConvNext(Box<ConvNextTiny>),
    EfficientNet(Box<EfficientNetV2S>),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    net: Net,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} channels)", self.spec.name, self.spec.feature_dim)
    }
}

impl Backbone {
    /// Builds a randomly initialized extractor; weights depend only on `(name, seed)`.
    pub fn build(name: &str, tiny_dim: usize, seed: u64) -> Result<Self> {
        let spec = backbone_spec(name, tiny_dim)?;
        let mut rng = rng_for(seed, &[hash_str(name)]);
        let net = match name {
            "tiny_test" => Net::Tiny(TinyNet::new(&mut rng, tiny_dim)),
            "densenet201" => Net::DenseNet(Box::new(DenseNet201::new(&mut rng))),
            "convnext_tiny" => Net::ConvNext(Box::new(ConvNextTiny::new(&mut rng))),
            _ => Net::EfficientNet(Box::new(EfficientNetV2S::new(&mut rng))),
        };
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// `3×H×W` image to a `dim×h×w` map.
    pub fn forward(&self, x: &Array3<f32>) -> FeatureMap {
        match &self.net {
            Net::Tiny(n) => n.forward(x),
            Net::DenseNet(n) => n.forward(x),
            Net::ConvNext(n) => n.forward(x),
            Net::EfficientNet(n) => n.forward(x),
        }
    }
}

/// The active extractors, in registry order.
#[derive(Clone, Debug)]
pub struct BackboneSet {
    backbones: Vec<Backbone>,
}

impl BackboneSet {
    pub fn build(names: &[String], tiny_dim: usize, seed: u64) -> Result<Self> {
        let ordered = registry_order(names)?;
        let backbones = ordered
            .iter()
            .map(|n| Backbone::build(n, tiny_dim, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { backbones })
    }

    pub fn backbones(&self) -> &[Backbone] {
        &self.backbones
    }

    pub fn specs(&self) -> Vec<BackboneSpec> {
        self.backbones.iter().map(|b| b.spec.clone()).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.backbones.iter().map(|b| b.spec.feature_dim).collect()
    }

    /// Dimension of `f_global`.
    pub fn total_dim(&self) -> usize {
        self.dims().iter().sum()
    }

    pub fn extract_one(&self, x: &Array3<f32>) -> Vec<FeatureMap> {
        self.backbones.iter().map(|b| b.forward(x)).collect()
    }

    /// One `N×C×h×w` map per backbone. An empty batch yields `0×C×0×0` maps.
    pub fn extract_features(&self, batch: &[Array3<f32>]) -> Result<Vec<Array4<f32>>> {
        for x in batch {
            if x.dim().0 != 3 {
                return Err(HistoError::invalid(format!("expected 3 input channels, got {}", x.dim().0)));
            }
        }
        let per_image: Vec<Vec<FeatureMap>> = batch.iter().map(|x| self.extract_one(x)).collect();
        Ok(self
            .backbones
            .iter()
            .enumerate()
            .map(|(b, bb)| {
                if per_image.is_empty() {
                    return Array4::zeros((0, bb.spec.feature_dim, 0, 0));
                }
                let views: Vec<_> = per_image.iter().map(|maps| maps[b].view().insert_axis(Axis(0))).collect();
                ndarray::concatenate(Axis(0), &views).expect("maps share a shape")
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IMAGE_SIZE;

    fn image(seed: u64) -> Array3<f32> {
        use rand::Rng;
        let mut rng = rng_for(seed, &[]);
        Array3::from_shape_fn((3, IMAGE_SIZE, IMAGE_SIZE), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tiny_batch_shape() {
        let set = BackboneSet::build(&["tiny_test".into()], TINY_DEFAULT_DIM, 1).unwrap();
        let maps = set.extract_features(&[image(1), image(2)]).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].dim(), (2, TINY_DEFAULT_DIM, 7, 7));
        assert!(maps[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_batch_is_vacuous() {
        let set = BackboneSet::build(&["tiny_test".into()], 8, 1).unwrap();
        let maps = set.extract_features(&[]).unwrap();
        assert_eq!(maps[0].dim(), (0, 8, 0, 0));
    }

    #[test]
    fn unknown_backbone_lists_registry() {
        let err = BackboneSet::build(&["resnet50".into()], 8, 1).unwrap_err();
        let msg = err.to_string();
        for name in REGISTRY {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn registry_order_is_fixed() {
        let names: Vec<String> = vec!["tiny_test".into(), "convnext_tiny".into(), "densenet201".into()];
        assert_eq!(registry_order(&names).unwrap(), vec!["densenet201", "convnext_tiny", "tiny_test"]);
    }

    #[test]
    fn full_backbone_dims_sum_to_3968() {
        let dims: Vec<usize> = FULL_BACKBONES.iter().map(|n| backbone_spec(n, 0).unwrap().feature_dim).collect();
        assert_eq!(dims, vec![1920, 768, 1280]);
        assert_eq!(dims.iter().sum::<usize>(), 3968);
    }

    #[test]
    fn weights_depend_on_seed() {
        let a = Backbone::build("tiny_test", 8, 1).unwrap().forward(&image(3));
        let b = Backbone::build("tiny_test", 8, 1).unwrap().forward(&image(3));
        let c = Backbone::build("tiny_test", 8, 2).unwrap().forward(&image(3));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
