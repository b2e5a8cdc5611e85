//! Raw extractor outputs memoized per (sample, transform).
//!
//! Extractors are frozen, so their maps are a pure function of the image and
//! the backbone seed. Caching them lets every fold and every epoch reuse one
//! forward pass per image and morphology transform.

use std::collections::HashMap;

use log::debug;
use ndarray::{Array3, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use super::BackboneSet;
use crate::dataset::{preprocess_sample, DatasetIndex, NormalizationStats};
use crate::error::{HistoError, Result};
use crate::nn::infer::FeatureMap;
use crate::nn::Tensor;

/// Morphology-preserving image transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    HFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Transform {
    pub const ALL: [Transform; 5] = [
        Transform::Identity,
        Transform::HFlip,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
    ];
    /// The transforms drawn for the morphology term.
    pub const MORPH: [Transform; 4] = [Transform::HFlip, Transform::Rot90, Transform::Rot180, Transform::Rot270];

    /// Applies the transform to a `C×H×W` array (rotations need `H == W`).
    pub fn apply<T: Clone>(self, x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        match self {
            Transform::Identity => x.clone(),
            Transform::HFlip => Array3::from_shape_fn((c, h, w), |(k, y, xx)| x[[k, y, w - 1 - xx]].clone()),
            Transform::Rot90 => {
                assert_eq!(h, w, "rotation needs a square image");
                Array3::from_shape_fn((c, h, w), |(k, y, xx)| x[[k, xx, w - 1 - y]].clone())
            }
            Transform::Rot180 => Array3::from_shape_fn((c, h, w), |(k, y, xx)| x[[k, h - 1 - y, w - 1 - xx]].clone()),
            Transform::Rot270 => {
                assert_eq!(h, w, "rotation needs a square image");
                Array3::from_shape_fn((c, h, w), |(k, y, xx)| x[[k, h - 1 - xx, y]].clone())
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    transforms: Vec<Transform>,
    /// sample id → transform slot → backbone → map.
    maps: HashMap<String, Vec<Vec<FeatureMap>>>,
}

impl FeatureCache {
    pub fn new(transforms: &[Transform]) -> Self {
        Self {
            transforms: transforms.to_vec(),
            maps: HashMap::new(),
        }
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.maps.contains_key(id)
    }

    /// Loads, preprocesses and encodes every sample of `index` not yet cached.
    pub fn fill(&mut self, backbones: &BackboneSet, index: &DatasetIndex, stats: &NormalizationStats) -> Result<()> {
        for (i, desc) in index.samples.iter().enumerate() {
            if self.maps.contains_key(&desc.id) {
                continue;
            }
            let sample = preprocess_sample(desc, stats)?;
            let per_transform = self
                .transforms
                .iter()
                .map(|t| backbones.extract_one(&t.apply(&sample.pixels)))
                .collect();
            self.maps.insert(desc.id.clone(), per_transform);
            if (i + 1) % 100 == 0 {
                debug!("encoded {}/{} samples", i + 1, index.len());
            }
        }
        Ok(())
    }

    /// Inserts precomputed maps (one per transform, each holding one map per backbone).
    pub fn insert(&mut self, id: &str, maps: Vec<Vec<FeatureMap>>) {
        assert_eq!(maps.len(), self.transforms.len());
        self.maps.insert(id.to_string(), maps);
    }

    pub fn get(&self, id: &str, t: Transform) -> Result<&[FeatureMap]> {
        let slot = self
            .transforms
            .iter()
            .position(|&x| x == t)
            .ok_or_else(|| HistoError::invalid(format!("transform {t:?} not cached")))?;
        self.maps
            .get(id)
            .map(|v| v[slot].as_slice())
            .ok_or_else(|| HistoError::invalid(format!("sample {id} has no cached features")))
    }

    /// Stacks the maps of `ids` for one backbone into an `N×C×h×w` `f64` tensor.
    pub fn batch(&self, ids: &[&str], t: Transform, backbone: usize) -> Result<Tensor> {
        let mut views = Vec::with_capacity(ids.len());
        for id in ids {
            views.push(self.get(id, t)?[backbone].view().insert_axis(Axis(0)));
        }
        if views.is_empty() {
            return Ok(Tensor::zeros(IxDyn(&[0, 0, 0, 0])));
        }
        let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| HistoError::invalid(e.to_string()))?;
        Ok(stacked.mapv(f64::from).into_dyn())
    }
}
