//! The trainable network on top of cached extractor maps.
//!
//! Forward order: per-backbone attention, pooled fusion into `f_global`,
//! projection to `z`, expert heads with gating, prototype logits, then the
//! final blend. The forward is split into [`Model::encode`] and
//! [`Model::classify`] so Monte-Carlo passes reuse one encoding.

use ndarray::{Array2, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{fuse_global, init_attention, init_projection, project_embedding, refine_attention, GateMode};
use crate::dataset::N_SUBTYPES;
use crate::error::{HistoError, Result};
use crate::experts::{
    dropout_mask, expert_forward, fuse_experts_graph, gate_weights, head_names, init_experts, ExpertRouting,
    GatedOutput, HEAD_HIDDEN, N_EXPERTS,
};
use crate::nn::graph::softmax_in_place;
use crate::nn::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::prototypes::{class_distances_graph, init_random_unit, PrototypeBank, ProtoInit};
use crate::rng::rng_for;

pub const PROTOTYPE_PARAM: &str = "prototypes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbones: Vec<String>,
    /// Channel count of the `tiny_test` extractor.
    pub tiny_dim: usize,
    /// Prototypes per class (`J`).
    pub prototypes_per_class: usize,
    /// Push-pull margin.
    pub margin: f64,
    /// Push weight.
    pub push_weight: f64,
    pub dropout_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub attention: bool,
    pub routing: ExpertRouting,
    pub proto_init: ProtoInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbones: vec!["tiny_test".into()],
            tiny_dim: crate::backbone::TINY_DEFAULT_DIM,
            prototypes_per_class: 3,
            margin: 0.5,
            push_weight: 1.0,
            dropout_rate: 0.3,
            lambda1: 0.5,
            lambda2: 0.5,
            attention: true,
            routing: ExpertRouting::Gated,
            proto_init: ProtoInit::KmeansPerClass,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        crate::backbone::registry_order(&self.backbones)?;
        if self.prototypes_per_class == 0 {
            return Err(HistoError::Config("prototypes_per_class must be >= 1".into()));
        }
        if !(self.margin > 0.0) || !(self.push_weight >= 0.0) {
            return Err(HistoError::Config("margin must be > 0 and push_weight >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(HistoError::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(HistoError::Config("lambda1 and lambda2 must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn gate_mode(&self) -> GateMode {
        if self.attention {
            GateMode::Learned
        } else {
            GateMode::Ones
        }
    }
}

/// Encoder outputs for one batch.
pub struct Encoded {
    pub f_global: Var,
    /// One `N×1×h×w` spatial mask per backbone.
    pub masks: Vec<Var>,
}

/// Classifier outputs for one batch; all `N×C` except `gate` (`N×(K+1)`).
pub struct Classified {
    pub heads: Vec<Var>,
    pub gate: Var,
    pub expert: Var,
    /// Per-class minimum prototype distances.
    pub distances: Var,
    pub proto_logits: Var,
    pub final_logits: Var,
}

/// One dropout mask per head, `N×256` each.
pub type DropoutMasks = Vec<Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Channel count of each active backbone, in registry order.
    pub dims: Vec<usize>,
    pub n_classes: usize,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters; prototypes start as random unit rows.
    pub fn init(config: &ModelConfig, dims: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.is_empty() || dims.contains(&0) {
            return Err(HistoError::invalid("every backbone needs a positive channel count"));
        }
        if n_classes < 2 {
            return Err(HistoError::invalid("at least two classes are required"));
        }
        let mut rng = rng_for(seed, &[0x30de1]);
        let mut params = ParamStore::new();
        for (b, &c) in dims.iter().enumerate() {
            init_attention(&mut params, &format!("attn.{b}"), c, &mut rng);
        }
        let d: usize = dims.iter().sum();
        init_projection(&mut params, d, &mut rng);
        init_experts(&mut params, d, n_classes, N_EXPERTS, &mut rng);
        let protos = init_random_unit(&mut rng, n_classes, config.prototypes_per_class, d);
        let flat = protos.into_shape_with_order((n_classes * config.prototypes_per_class, d)).unwrap();
        params.insert(PROTOTYPE_PARAM, flat.into_dyn());
        Ok(Self {
            config: config.clone(),
            dims: dims.to_vec(),
            n_classes,
            params,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn prototype_bank(&self) -> Result<PrototypeBank> {
        PrototypeBank::from_flat(
            self.params.get(PROTOTYPE_PARAM).expect("prototypes exist"),
            self.n_classes,
            self.config.margin,
            self.config.push_weight,
        )
    }

    pub fn set_prototypes(&mut self, bank: &PrototypeBank) -> Result<()> {
        let (c, j, d) = bank.prototypes.dim();
        if c != self.n_classes || j != self.config.prototypes_per_class || d != self.feature_dim() {
            return Err(HistoError::invalid(format!("prototype bank {c}×{j}×{d} does not fit the model")));
        }
        self.params.insert(PROTOTYPE_PARAM, bank.flat());
        Ok(())
    }

    /// `maps[b]` is the `N×C_b×h×w` map of backbone `b`.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, maps: &[Var]) -> Result<Encoded> {
        if maps.len() != self.dims.len() {
            return Err(HistoError::invalid(format!("{} maps for {} backbones", maps.len(), self.dims.len())));
        }
        let mode = self.config.gate_mode();
        let mut refined = Vec::with_capacity(maps.len());
        let mut masks = Vec::with_capacity(maps.len());
        for (b, &m) in maps.iter().enumerate() {
            let s = g.shape(m);
            if s.len() != 4 || s[1] != self.dims[b] {
                return Err(HistoError::invalid(format!(
                    "backbone {b}: expected N×{}×h×w map, got {:?}",
                    self.dims[b], s
                )));
            }
            let r = refine_attention(g, p, &format!("attn.{b}"), m, mode);
            refined.push(r.map);
            masks.push(r.mask);
        }
        let f_global = fuse_global(g, &refined);
        Ok(Encoded { f_global, masks })
    }

    pub fn embed(&self, g: &mut Graph, p: &BoundParams, f_global: Var) -> Var {
        project_embedding(g, p, f_global)
    }

    /// `magnifications[i]` is the ordinal of sample `i`; only read under magnification routing.
    pub fn classify(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        f_global: Var,
        masks: Option<&DropoutMasks>,
        magnifications: &[usize],
    ) -> Result<Classified> {
        let n = g.shape(f_global)[0];
        let names = head_names(N_EXPERTS);
        let heads: Vec<Var> = names
            .iter()
            .enumerate()
            .map(|(k, h)| expert_forward(g, p, h, f_global, masks.map(|m| &m[k])))
            .collect();
        let gate = match self.config.routing {
            ExpertRouting::Gated => gate_weights(g, p, f_global),
            ExpertRouting::Magnification => {
                if magnifications.len() != n {
                    return Err(HistoError::invalid("magnification routing needs one ordinal per sample"));
                }
                let mut w = Tensor::zeros(IxDyn(&[n, N_EXPERTS + 1]));
                for (i, &m) in magnifications.iter().enumerate() {
                    w[[i, m % N_EXPERTS]] = 1.0;
                }
                g.constant(w)
            }
        };
        let expert = fuse_experts_graph(g, &heads, gate);
        let distances = class_distances_graph(g, f_global, p.var(PROTOTYPE_PARAM), self.n_classes);
        let proto_logits = g.scale(distances, -1.0);
        let final_logits = g.weighted_sum(&[(self.config.lambda1, expert), (self.config.lambda2, proto_logits)]);
        Ok(Classified {
            heads,
            gate,
            expert,
            distances,
            proto_logits,
            final_logits,
        })
    }

    /// Fresh dropout masks for an `n`-sample batch.
    pub fn dropout_masks<R: Rng>(&self, rng: &mut R, n: usize) -> DropoutMasks {
        (0..=N_EXPERTS)
            .map(|_| dropout_mask(rng, n, HEAD_HIDDEN, self.config.dropout_rate))
            .collect()
    }

    /// Deterministic `f_global` rows for a batch of maps.
    pub fn global_features(&self, maps: &[Tensor]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let enc = self.encode(&mut g, &p, &vars)?;
        Ok(to_array2(g.value(enc.f_global)))
    }

    /// Softmax of the final logits; dropout is off.
    pub fn predict_proba(&self, maps: &[Tensor], magnifications: &[usize]) -> Result<Array2<f64>> {
        let mut out = self.mc_proba(maps, magnifications, 1, None)?;
        Ok(out.pop().expect("one pass"))
    }

    /// `passes` probability matrices. With `seed = None` dropout stays off;
    /// otherwise pass `t` draws its masks from the substream `(seed, t)`.
    pub fn mc_proba(
        &self,
        maps: &[Tensor],
        magnifications: &[usize],
        passes: usize,
        seed: Option<u64>,
    ) -> Result<Vec<Array2<f64>>> {
        if passes == 0 {
            return Err(HistoError::invalid("at least one Monte-Carlo pass is required"));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let enc = self.encode(&mut g, &p, &vars)?;
        let n = g.shape(enc.f_global)[0];
        let mut out = Vec::with_capacity(passes);
        for t in 0..passes {
            let masks = seed.map(|s| self.dropout_masks(&mut rng_for(s, &[t as u64]), n));
            let cls = self.classify(&mut g, &p, enc.f_global, masks.as_ref(), magnifications)?;
            out.push(softmax_rows(g.value(cls.final_logits)));
        }
        Ok(out)
    }

    /// Every intermediate of the deterministic forward, one record per sample.
    pub fn gated_outputs(&self, maps: &[Tensor], magnifications: &[usize]) -> Result<Vec<GatedOutput>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let enc = self.encode(&mut g, &p, &vars)?;
        let cls = self.classify(&mut g, &p, enc.f_global, None, magnifications)?;
        let n = g.shape(enc.f_global)[0];
        let row = |g: &Graph, v: Var, i: usize| -> Vec<f64> { g.value(v).index_axis(Axis(0), i).iter().copied().collect() };
        Ok((0..n)
            .map(|i| {
                let head_rows: Vec<Vec<f64>> = cls.heads.iter().map(|&h| row(&g, h, i)).collect();
                let c = head_rows[0].len();
                GatedOutput {
                    head_logits: Array2::from_shape_vec((head_rows.len(), c), head_rows.concat()).unwrap(),
                    gate_weights: row(&g, cls.gate, i),
                    expert_logits: row(&g, cls.expert, i),
                    proto_logits: row(&g, cls.proto_logits, i),
                    final_logits: row(&g, cls.final_logits, i),
                    lambda1: self.config.lambda1,
                    lambda2: self.config.lambda2,
                }
            })
            .collect())
    }
}

pub fn to_array2(t: &Tensor) -> Array2<f64> {
    t.clone().into_dimensionality().expect("two-dimensional tensor")
}

pub fn softmax_rows(t: &Tensor) -> Array2<f64> {
    let mut a = to_array2(t);
    for mut r in a.outer_iter_mut() {
        let mut v: Vec<f64> = r.iter().copied().collect();
        softmax_in_place(&mut v);
        r.assign(&ndarray::Array1::from(v));
    }
    a
}

/// Superclass of each of the eight subtypes (benign first).
pub fn subtype_taxonomy() -> Vec<usize> {
    (0..N_SUBTYPES)
        .map(|i| crate::dataset::Subtype::new(i).unwrap().superclass() as usize)
        .collect()
}
