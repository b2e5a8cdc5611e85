//! Fold training, k-fold ensembling, ablation presets and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureCache, Transform};
use crate::dataset::{kfold_split, DatasetIndex, NormalizationStats};
use crate::error::{HistoError, Result};
use crate::evaluation::compute_metrics;
use crate::losses::{
    bio_loss_graph, build_relation_matrix, focal_loss_graph, morph_loss_graph, spatial_loss_graph, supcon_loss_graph,
    LossWeights, RelationMatrix, COMPONENTS,
};
use crate::model::{subtype_taxonomy, DropoutMasks, Model, ModelConfig};
use crate::nn::optim::{cosine_lr, AdamState, AdamW};
use crate::nn::{BoundParams, Graph, ParamStore, StoredTensor, Tensor, Var};
use crate::prototypes::{init_kmeans_per_class, proto_loss_graph, PrototypeBank, ProtoInit};
use crate::rng::{derive_seed, rng_for};
use crate::uncertainty::{summarize_passes, UncertaintyReport};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Ablation variants; each removes one component of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Single best fold instead of the weighted ensemble.
    A1,
    /// Plain cross-entropy only.
    A2,
    /// Attention disabled.
    A3,
    /// Prototype logits and prototype loss removed.
    A4,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::A1, Ablation::A2, Ablation::A3, Ablation::A4];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::A1 => "A1",
            Ablation::A2 => "A2",
            Ablation::A3 => "A3",
            Ablation::A4 => "A4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HistoError::Config(format!("unknown ablation '{s}' (expected full, A1, A2, A3 or A4)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub k_folds: usize,
    /// Early-stopping patience in epochs without a validation-F1 improvement.
    pub patience: usize,
    /// Blend between block averaging and identity in the relation matrix.
    pub relation_w_same: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            k_folds: 5,
            patience: 10,
            relation_w_same: 1.0,
            seed: 42,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(HistoError::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(HistoError::Config("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        if self.k_folds < 2 {
            return Err(HistoError::Config("k_folds must be at least 2".into()));
        }
        if self.patience == 0 {
            return Err(HistoError::Config("patience must be at least 1".into()));
        }
        if !(self.relation_w_same > 0.0 && self.relation_w_same <= 1.0) {
            return Err(HistoError::Config("relation_w_same must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// The configuration with the ablation preset applied.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        match self.ablation {
            Ablation::Full | Ablation::A1 => {}
            Ablation::A2 => {
                c.loss = LossWeights {
                    tau: c.loss.tau,
                    ..LossWeights::cross_entropy_only()
                };
            }
            Ablation::A3 => c.model.attention = false,
            Ablation::A4 => {
                c.model.lambda2 = 0.0;
                c.loss.alpha[2] = 0.0;
            }
        }
        c
    }

    pub fn relation(&self) -> Result<RelationMatrix> {
        build_relation_matrix(&subtype_taxonomy(), self.relation_w_same)
    }
}

/// Sample ids with labels and magnification ordinals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Subset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub magnifications: Vec<usize>,
}

impl Subset {
    pub fn from_index(index: &DatasetIndex) -> Self {
        Self {
            ids: index.samples.iter().map(|s| s.id.clone()).collect(),
            labels: index.samples.iter().map(|s| s.label()).collect(),
            magnifications: index.samples.iter().map(|s| s.magnification.ordinal()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Subset {
        Subset {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            magnifications: rows.iter().map(|&i| self.magnifications[i]).collect(),
        }
    }

    /// One `N×C×h×w` tensor per backbone.
    pub fn maps(&self, cache: &FeatureCache, transform: Transform, n_backbones: usize) -> Result<Vec<Tensor>> {
        let ids: Vec<&str> = self.ids.iter().map(String::as_str).collect();
        (0..n_backbones).map(|b| cache.batch(&ids, transform, b)).collect()
    }
}

/// A mini-batch: maps under the identity and (optionally) a morphology transform.
pub struct Batch {
    pub maps: Vec<Tensor>,
    pub transformed: Option<Vec<Tensor>>,
    pub labels: Vec<usize>,
    pub magnifications: Vec<usize>,
}

/// Graph handles of one objective evaluation.
pub struct Objective {
    pub total: Var,
    /// Unweighted component values in the fixed order; 0 for inactive terms.
    pub components: [f64; 6],
    pub final_logits: Var,
}

/// Builds `Σ α_i L_i` for a batch. Terms with `α_i = 0` are not evaluated.
/// A batch without positive pairs contributes no contrastive term.
pub fn build_objective(
    g: &mut Graph,
    p: &BoundParams,
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    relation: &RelationMatrix,
    masks: Option<&DropoutMasks>,
) -> Result<Objective> {
    let a = weights.alpha;
    let maps: Vec<Var> = batch.maps.iter().map(|m| g.constant(m.clone())).collect();
    let enc = model.encode(g, p, &maps)?;
    let cls = model.classify(g, p, enc.f_global, masks, &batch.magnifications)?;
    let mut terms: Vec<(f64, Var)> = Vec::new();
    let mut vars: [Option<Var>; 6] = [None; 6];

    vars[0] = Some(focal_loss_graph(g, cls.final_logits, &batch.labels, weights.gamma, None)?);
    if a[1] > 0.0 {
        let z = model.embed(g, p, enc.f_global);
        match supcon_loss_graph(g, z, &batch.labels, weights.tau) {
            Ok(v) => vars[1] = Some(v),
            Err(HistoError::InvalidInput(msg)) if msg.contains("no positive pairs") => {}
            Err(e) => return Err(e),
        }
    }
    if a[2] > 0.0 {
        vars[2] = Some(proto_loss_graph(
            g,
            cls.distances,
            &batch.labels,
            model.config.margin,
            model.config.push_weight,
        )?);
    }
    if a[3] > 0.0 {
        if let Some(t) = &batch.transformed {
            let tmaps: Vec<Var> = t.iter().map(|m| g.constant(m.clone())).collect();
            let tenc = model.encode(g, p, &tmaps)?;
            vars[3] = Some(morph_loss_graph(g, enc.f_global, tenc.f_global)?);
        }
    }
    if a[4] > 0.0 {
        vars[4] = Some(spatial_loss_graph(g, &enc.masks)?);
    }
    if a[5] > 0.0 {
        vars[5] = Some(bio_loss_graph(g, cls.final_logits, relation));
    }

    let mut components = [0.0; 6];
    for (i, v) in vars.iter().enumerate() {
        if let Some(v) = *v {
            let value = g.item(v);
            if !value.is_finite() {
                return Err(HistoError::NonFiniteLoss {
                    component: COMPONENTS[i].to_string(),
                });
            }
            components[i] = value;
            if a[i] > 0.0 {
                terms.push((a[i], v));
            }
        }
    }
    let total = if terms.is_empty() { g.scalar(0.0) } else { g.weighted_sum(&terms) };
    Ok(Objective {
        total,
        components,
        final_logits: cls.final_logits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    /// Mean unweighted component losses over the epoch's batches.
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    /// Running accuracy over the epoch's batches (dropout on, weights moving).
    pub train_accuracy: f64,
    /// Accuracy of the end-of-epoch weights on the training subset, dropout off.
    pub train_eval_accuracy: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
    pub lr: f64,
}

/// Everything needed to continue a fold after an interruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldState {
    pub fold: usize,
    pub epoch_next: usize,
    pub params: BTreeMap<String, StoredTensor>,
    pub adam: AdamState,
    pub best_params: BTreeMap<String, StoredTensor>,
    pub best_f1: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: Model,
    pub val_f1: f64,
    pub val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Shared inputs of every fold.
pub struct TrainContext<'a> {
    /// Already passed through [`TrainConfig::effective`].
    pub config: TrainConfig,
    pub cache: &'a FeatureCache,
    pub dims: Vec<usize>,
    pub n_classes: usize,
}

impl<'a> TrainContext<'a> {
    pub fn new(config: &TrainConfig, cache: &'a FeatureCache, dims: &[usize], n_classes: usize) -> Result<Self> {
        config.validate()?;
        let config = config.effective();
        Ok(Self {
            config,
            cache,
            dims: dims.to_vec(),
            n_classes,
        })
    }

    fn model_seed(&self, fold: usize) -> u64 {
        derive_seed(self.config.seed, &[0x5eed, fold as u64])
    }

    /// Initial model of a fold; prototypes from per-class k-means when configured.
    pub fn initial_model(&self, fold: usize, train: &Subset) -> Result<Model> {
        let mut model = Model::init(&self.config.model, &self.dims, self.n_classes, self.model_seed(fold))?;
        if self.config.model.proto_init == ProtoInit::KmeansPerClass && !train.is_empty() {
            let maps = train.maps(self.cache, Transform::Identity, self.dims.len())?;
            let feats = model.global_features(&maps)?;
            let (protos, warnings) = init_kmeans_per_class(
                &feats,
                &train.labels,
                self.n_classes,
                self.config.model.prototypes_per_class,
                self.model_seed(fold),
            );
            for w in warnings {
                warn!("fold {fold}: {w}");
            }
            let bank = PrototypeBank::new(protos, self.config.model.margin, self.config.model.push_weight)?;
            model.set_prototypes(&bank)?;
        }
        Ok(model)
    }

    fn batch(&self, subset: &Subset, rows: &[usize], transform: Option<Transform>) -> Result<Batch> {
        let part = subset.select(rows);
        let n_b = self.dims.len();
        Ok(Batch {
            maps: part.maps(self.cache, Transform::Identity, n_b)?,
            transformed: transform.map(|t| part.maps(self.cache, t, n_b)).transpose()?,
            labels: part.labels,
            magnifications: part.magnifications,
        })
    }

    pub fn fresh_state(&self, fold: usize, train: &Subset) -> Result<FoldState> {
        let model = self.initial_model(fold, train)?;
        let stored = model.params.to_stored();
        Ok(FoldState {
            fold,
            epoch_next: 0,
            params: stored.clone(),
            adam: AdamW::new(self.config.weight_decay).state(),
            best_params: stored,
            best_f1: f64::NEG_INFINITY,
            best_val_accuracy: 0.0,
            best_epoch: None,
            since_best: 0,
            stopped: false,
            history: Vec::new(),
        })
    }

    fn model_from(&self, stored: &BTreeMap<String, StoredTensor>) -> Result<Model> {
        let params = ParamStore::from_stored(stored).ok_or_else(|| HistoError::Checkpoint("corrupt parameter tensor".into()))?;
        Ok(Model {
            config: self.config.model.clone(),
            dims: self.dims.clone(),
            n_classes: self.n_classes,
            params,
        })
    }

    /// Deterministic accuracy and weighted F1 on `subset`.
    pub fn validate(&self, model: &Model, subset: &Subset) -> Result<(f64, f64)> {
        if subset.is_empty() {
            return Err(HistoError::invalid("validation split is empty"));
        }
        let maps = subset.maps(self.cache, Transform::Identity, self.dims.len())?;
        let probs = model.predict_proba(&maps, &subset.magnifications)?;
        let preds: Vec<usize> = probs
            .outer_iter()
            .map(|r| crate::uncertainty::argmax(r.as_slice().unwrap()))
            .collect();
        let m = compute_metrics(&preds, &subset.labels, self.n_classes)?;
        Ok((m.accuracy, m.weighted_f1))
    }

    /// Mean objective and its components over one fixed-order pass of `subset`
    /// with dropout off; used to check initialization determinism.
    pub fn evaluate_objective(&self, model: &Model, subset: &Subset) -> Result<(f64, [f64; 6])> {
        let relation = self.config.relation()?;
        let rows: Vec<usize> = (0..subset.len()).collect();
        let batch = self.batch(subset, &rows, Some(Transform::HFlip).filter(|_| self.morph_enabled()))?;
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let obj = build_objective(&mut g, &p, model, &batch, &self.config.loss, &relation, None)?;
        Ok((g.item(obj.total), obj.components))
    }

    fn morph_enabled(&self) -> bool {
        self.config.loss.alpha[3] > 0.0 && Transform::MORPH.iter().all(|t| self.cache.transforms().contains(t))
    }

    /// Trains one fold, resuming from `state` when given. `on_epoch` sees the
    /// state after every completed epoch (for persistence).
    pub fn train_fold(
        &self,
        fold: usize,
        train: &Subset,
        val: &Subset,
        state: Option<FoldState>,
        on_epoch: &mut dyn FnMut(&FoldState) -> Result<()>,
    ) -> Result<FoldOutcome> {
        if train.is_empty() || val.is_empty() {
            return Err(HistoError::invalid(format!("fold {fold}: empty train or validation split")));
        }
        let cfg = &self.config;
        let relation = cfg.relation()?;
        let mut state = match state {
            Some(s) => {
                if s.fold != fold {
                    return Err(HistoError::Checkpoint(format!("state belongs to fold {}, not {fold}", s.fold)));
                }
                s
            }
            None => self.fresh_state(fold, train)?,
        };
        let mut model = self.model_from(&state.params)?;
        let mut opt = AdamW::restore(cfg.weight_decay, &state.adam)
            .ok_or_else(|| HistoError::Checkpoint("corrupt optimizer state".into()))?;
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let morph = self.morph_enabled();

        if cfg.epochs == 0 && state.best_epoch.is_none() {
            let (acc, f1) = self.validate(&model, val)?;
            state.best_f1 = f1;
            state.best_val_accuracy = acc;
        }

        while state.epoch_next < cfg.epochs && !state.stopped {
            let epoch = state.epoch_next;
            let mut rng = rng_for(cfg.seed, &[0xe90c, fold as u64, epoch as u64]);
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut sums = [0.0; 6];
            let mut total_sum = 0.0;
            let mut correct = 0usize;
            let mut batches = 0usize;
            let mut lr = cfg.learning_rate;
            for rows in order.chunks(cfg.batch_size) {
                let transform = morph.then(|| Transform::MORPH[rng.random_range(0..Transform::MORPH.len())]);
                let batch = self.batch(train, rows, transform)?;
                let masks = model.dropout_masks(&mut rng, rows.len());
                let mut g = Graph::new();
                let p = model.params.bind(&mut g);
                let obj = build_objective(&mut g, &p, &model, &batch, &cfg.loss, &relation, Some(&masks)).map_err(
                    |e| match e {
                        HistoError::NonFiniteLoss { component } => HistoError::Divergence { fold, epoch, component },
                        other => other,
                    },
                )?;
                let total = g.item(obj.total);
                if !total.is_finite() {
                    return Err(HistoError::Divergence {
                        fold,
                        epoch,
                        component: "total".into(),
                    });
                }
                for (s, c) in sums.iter_mut().zip(obj.components) {
                    *s += c;
                }
                total_sum += total;
                batches += 1;
                for (r, &y) in g.value(obj.final_logits).outer_iter().zip(&batch.labels) {
                    if crate::uncertainty::argmax(r.as_slice().unwrap()) == y {
                        correct += 1;
                    }
                }
                let grads = g.backward(obj.total);
                let named = p.gradients(&grads, &model.params);
                lr = cosine_lr(cfg.learning_rate, opt.steps_taken(), total_steps);
                opt.step(&mut model.params, &named, lr);
            }
            let (val_acc, val_f1) = self.validate(&model, val)?;
            let (train_eval_accuracy, _) = self.validate(&model, train)?;
            let nb = batches.max(1) as f64;
            let record = EpochRecord {
                fold,
                epoch,
                components: COMPONENTS
                    .iter()
                    .zip(sums)
                    .map(|(k, s)| (k.to_string(), s / nb))
                    .collect(),
                total: total_sum / nb,
                train_accuracy: correct as f64 / train.len() as f64,
                train_eval_accuracy,
                val_accuracy: val_acc,
                val_f1,
                lr,
            };
            info!(
                "fold {fold} epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3} val f1 {:.3}",
                record.total, record.train_accuracy, val_acc, val_f1
            );
            state.history.push(record);
            state.params = model.params.to_stored();
            state.adam = opt.state();
            state.epoch_next = epoch + 1;
            if val_f1 > state.best_f1 {
                state.best_f1 = val_f1;
                state.best_val_accuracy = val_acc;
                state.best_epoch = Some(epoch);
                state.best_params = state.params.clone();
                state.since_best = 0;
            } else {
                state.since_best += 1;
                if state.since_best >= cfg.patience {
                    info!("fold {fold}: early stop after epoch {epoch}");
                    state.stopped = true;
                }
            }
            on_epoch(&state)?;
        }

        let best = self.model_from(&state.best_params)?;
        Ok(FoldOutcome {
            fold,
            model: best,
            val_f1: state.best_f1,
            val_accuracy: state.best_val_accuracy,
            best_epoch: state.best_epoch,
            history: state.history,
        })
    }

    /// k-fold training over `train`; folds follow `kfold_split`.
    pub fn train_ensemble(
        &self,
        train: &DatasetIndex,
        resume: &BTreeMap<usize, FoldState>,
        on_epoch: &mut dyn FnMut(&FoldState) -> Result<()>,
    ) -> Result<(Ensemble, Vec<FoldOutcome>)> {
        let kf = kfold_split(train, self.config.k_folds, self.config.seed)?;
        for w in &kf.warnings {
            warn!("{w}");
        }
        let mut outcomes = Vec::with_capacity(kf.folds.len());
        for (k, fold) in kf.folds.iter().enumerate() {
            let tr = Subset::from_index(&fold.train);
            let va = Subset::from_index(&fold.val);
            outcomes.push(self.train_fold(k, &tr, &va, resume.get(&k).cloned(), on_epoch)?);
        }
        let ensemble = Ensemble::from_outcomes(&outcomes)?;
        let ensemble = if self.config.ablation == Ablation::A1 {
            ensemble.single_best()
        } else {
            ensemble
        };
        Ok((ensemble, outcomes))
    }
}

/// Outcome of a finite-difference comparison against the analytic gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub components: [f64; 6],
}

/// Absolute scale below which a gradient entry counts as zero when forming
/// the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-7;

/// Compares the analytic gradient of the objective with central differences
/// on `coords` random coordinates drawn evenly from the parameters whose
/// names start with one of `prefixes`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    relation: &RelationMatrix,
    masks: Option<&DropoutMasks>,
    prefixes: &[&str],
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let obj = build_objective(&mut g, &p, model, batch, weights, relation, masks)?;
    let analytic = p.gradients(&g.backward(obj.total), &model.params);
    let loss_at = |params: &ParamStore| -> Result<f64> {
        let probe = Model {
            params: params.clone(),
            ..model.clone()
        };
        let mut g = Graph::new();
        let p = probe.params.bind_frozen(&mut g);
        let obj = build_objective(&mut g, &p, &probe, batch, weights, relation, masks)?;
        Ok(g.item(obj.total))
    };
    let mut rng = rng_for(seed, &[0x9c4e]);
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        components: obj.components,
    };
    let per_group = coords.div_ceil(prefixes.len().max(1));
    for prefix in prefixes {
        let names: Vec<&str> = model.params.names().filter(|n| n.starts_with(prefix)).collect();
        if names.is_empty() {
            return Err(HistoError::invalid(format!("no parameter starts with '{prefix}'")));
        }
        let sizes: Vec<usize> = names.iter().map(|n| model.params.get(n).unwrap().len()).collect();
        let total: usize = sizes.iter().sum();
        for _ in 0..per_group {
            let mut flat = rng.random_range(0..total);
            let mut which = 0;
            while flat >= sizes[which] {
                flat -= sizes[which];
                which += 1;
            }
            let name = names[which];
            let mut plus = model.params.clone();
            let mut minus = model.params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().expect("contiguous")[flat] += eps;
            minus.get_mut(name).unwrap().as_slice_mut().expect("contiguous")[flat] -= eps;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * eps);
            let exact = analytic[name].as_slice().expect("contiguous")[flat];
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(GRADCHECK_FLOOR);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (name.to_string(), flat);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Validation-F1-proportional simplex weights; all-zero scores give uniform weights.
pub fn member_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(HistoError::invalid("an ensemble needs at least one member"));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(HistoError::invalid("member scores must be finite and nonnegative"));
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / scores.len() as f64; scores.len()]);
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub fold: usize,
    pub model: Model,
    pub val_f1: f64,
    pub val_accuracy: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        let scores: Vec<f64> = members.iter().map(|m| m.val_f1.max(0.0)).collect();
        let weights = member_weights(&scores)?;
        Ok(Self { members, weights })
    }

    pub fn from_outcomes(outcomes: &[FoldOutcome]) -> Result<Self> {
        Self::new(
            outcomes
                .iter()
                .map(|o| Member {
                    fold: o.fold,
                    model: o.model.clone(),
                    val_f1: o.val_f1,
                    val_accuracy: o.val_accuracy,
                    best_epoch: o.best_epoch,
                })
                .collect(),
        )
    }

    /// Index of the member with the highest validation F1 (first on ties).
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, m) in self.members.iter().enumerate() {
            if m.val_f1 > self.members[best].val_f1 {
                best = i;
            }
        }
        best
    }

    pub fn single_best(&self) -> Ensemble {
        let m = self.members[self.best_index()].clone();
        Ensemble {
            members: vec![m],
            weights: vec![1.0],
        }
    }

    /// Weighted probability average with pooled uncertainty, see
    /// [`pool_members`]. `seed = None` disables dropout.
    pub fn predict(
        &self,
        maps: &[Tensor],
        magnifications: &[usize],
        passes: usize,
        seed: Option<u64>,
        threshold: f64,
    ) -> Result<UncertaintyReport> {
        if self.members.is_empty() {
            return Err(HistoError::invalid("ensemble has no members"));
        }
        let mut reports = Vec::with_capacity(self.members.len());
        for (k, m) in self.members.iter().enumerate() {
            let member_seed = seed.map(|s| derive_seed(s, &[k as u64]));
            let passes = m.model.mc_proba(maps, magnifications, passes, member_seed)?;
            reports.push(summarize_passes(&passes, threshold)?);
        }
        pool_members(&reports, &self.weights, threshold)
    }
}

/// Weighted mean of member summaries. Uncertainty is the weighted mean of
/// member uncertainties plus the class-averaged weighted variance of the
/// member means.
pub fn pool_members(reports: &[UncertaintyReport], weights: &[f64], threshold: f64) -> Result<UncertaintyReport> {
    if reports.is_empty() || reports.len() != weights.len() {
        return Err(HistoError::invalid("need one weight per member summary"));
    }
    let n = reports[0].len();
    if reports.iter().any(|r| r.len() != n) {
        return Err(HistoError::invalid("member summaries disagree in length"));
    }
    let c = reports[0].mean_probs.first().map_or(0, Vec::len);
    let mut means = Vec::with_capacity(n);
    let mut unc = Vec::with_capacity(n);
    for i in 0..n {
        let mut mean = vec![0.0; c];
        let mut u = 0.0;
        for (r, &w) in reports.iter().zip(weights) {
            for (acc, &p) in mean.iter_mut().zip(&r.mean_probs[i]) {
                *acc += w * p;
            }
            u += w * r.uncertainty[i];
        }
        let mut between = 0.0;
        for k in 0..c {
            between += reports
                .iter()
                .zip(weights)
                .map(|(r, &w)| w * (r.mean_probs[i][k] - mean[k]).powi(2))
                .sum::<f64>();
        }
        means.push(mean);
        unc.push(u + between / c.max(1) as f64);
    }
    UncertaintyReport::from_parts(means, unc, threshold)
}

/// One member as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberCheckpoint {
    pub fold: usize,
    pub val_f1: f64,
    pub val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub params: BTreeMap<String, StoredTensor>,
}

/// Single-file archive of a trained ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    /// Backbones in registry order.
    pub backbones: Vec<String>,
    pub tiny_dim: usize,
    /// Seed of the frozen extractor weights.
    pub backbone_seed: u64,
    pub dims: Vec<usize>,
    pub n_classes: usize,
    pub attention_enabled: bool,
    pub ablation: Ablation,
    /// Configuration as given (before the ablation preset).
    pub config: TrainConfig,
    pub normalization: Option<NormalizationStats>,
    pub weights: Vec<f64>,
    pub members: Vec<MemberCheckpoint>,
}

impl Checkpoint {
    pub fn from_ensemble(
        ensemble: &Ensemble,
        config: &TrainConfig,
        dims: &[usize],
        n_classes: usize,
        normalization: Option<NormalizationStats>,
    ) -> Result<Self> {
        let eff = config.effective();
        Ok(Self {
            format: CHECKPOINT_FORMAT,
            backbones: crate::backbone::registry_order(&config.model.backbones)?,
            tiny_dim: config.model.tiny_dim,
            backbone_seed: config.seed,
            dims: dims.to_vec(),
            n_classes,
            attention_enabled: eff.model.attention,
            ablation: config.ablation,
            config: config.clone(),
            normalization,
            weights: ensemble.weights.clone(),
            members: ensemble
                .members
                .iter()
                .map(|m| MemberCheckpoint {
                    fold: m.fold,
                    val_f1: m.val_f1,
                    val_accuracy: m.val_accuracy,
                    best_epoch: m.best_epoch,
                    params: m.model.params.to_stored(),
                })
                .collect(),
        })
    }

    pub fn to_ensemble(&self) -> Result<Ensemble> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(HistoError::Checkpoint(format!("unsupported checkpoint format {}", self.format)));
        }
        if self.members.is_empty() || self.members.len() != self.weights.len() {
            return Err(HistoError::Checkpoint("member list and weights disagree".into()));
        }
        let model_cfg = self.config.effective().model;
        let members = self
            .members
            .iter()
            .map(|m| {
                let params = ParamStore::from_stored(&m.params)
                    .ok_or_else(|| HistoError::Checkpoint(format!("fold {}: corrupt tensor", m.fold)))?;
                Ok(Member {
                    fold: m.fold,
                    model: Model {
                        config: model_cfg.clone(),
                        dims: self.dims.clone(),
                        n_classes: self.n_classes,
                        params,
                    },
                    val_f1: m.val_f1,
                    val_accuracy: m.val_accuracy,
                    best_epoch: m.best_epoch,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble {
            members,
            weights: self.weights.clone(),
        })
    }

    /// Errors unless `backbones` (any order) names exactly the stored extractors.
    pub fn check_backbones(&self, backbones: &[String], tiny_dim: usize) -> Result<()> {
        let requested = crate::backbone::registry_order(backbones)?;
        if requested != self.backbones || (requested.iter().any(|b| b == "tiny_test") && tiny_dim != self.tiny_dim) {
            return Err(HistoError::Config(format!(
                "checkpoint was trained with backbones {:?} (tiny dim {}), config requests {:?} (tiny dim {})",
                self.backbones, self.tiny_dim, requested, tiny_dim
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            HistoError::Serde(m) => HistoError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HistoError::io(parent, e))?;
    }
    let text = serde_json::to_string(value)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| HistoError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HistoError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HistoError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn member(model: &Model, f1: f64, fold: usize) -> Member {
        Member {
            fold,
            model: model.clone(),
            val_f1: f1,
            val_accuracy: f1,
            best_epoch: Some(0),
        }
    }

    #[test]
    fn member_weight_examples() {
        for w in member_weights(&[0.7; 5]).unwrap() {
            assert_abs_diff_eq!(w, 0.2, epsilon = 1e-15);
        }
        let w = member_weights(&[0.9, 0.9, 0.9, 0.9, 0.6]).unwrap();
        for &x in &w[..4] {
            assert_abs_diff_eq!(x, 0.9 / 4.2, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w[4], 0.6 / 4.2, epsilon = 1e-12);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(member_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(member_weights(&[]).is_err());
    }

    #[test]
    fn presets_follow_the_variant_definitions() {
        let base = TrainConfig::default();
        let a2 = TrainConfig { ablation: Ablation::A2, ..base.clone() }.effective();
        assert_eq!(a2.loss.alpha, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a2.loss.gamma, 0.0);
        let a3 = TrainConfig { ablation: Ablation::A3, ..base.clone() }.effective();
        assert!(!a3.model.attention);
        let a4 = TrainConfig { ablation: Ablation::A4, ..base.clone() }.effective();
        assert_eq!(a4.model.lambda2, 0.0);
        assert_eq!(a4.loss.alpha[2], 0.0);
        assert_eq!(TrainConfig { ablation: Ablation::A1, ..base.clone() }.effective().model, base.model);
        assert_eq!(Ablation::parse("a3").unwrap(), Ablation::A3);
        assert!(Ablation::parse("A5").is_err());
    }

    #[test]
    fn ensemble_prediction_rules() {
        let cfg = ModelConfig::default();
        let m = Model::init(&cfg, &[4], 8, 1).unwrap();
        let maps = vec![crate::nn::layers::normal(&mut rng_for(2, &[]), &[3, 4, 7, 7], 1.0)];
        let mags = [0, 1, 2];
        let single = Ensemble::new(vec![member(&m, 0.8, 0)]).unwrap();
        let alone = crate::uncertainty::mc_forward(&m, &maps, &mags, 6, Some(derive_seed(5, &[0])), 0.8).unwrap();
        assert_eq!(single.predict(&maps, &mags, 6, Some(5), 0.8).unwrap(), alone);

        let twins = Ensemble::new(vec![member(&m, 0.8, 0), member(&m, 0.5, 1)]).unwrap();
        let det = twins.predict(&maps, &mags, 1, None, 0.8).unwrap();
        let base = single.predict(&maps, &mags, 1, None, 0.8).unwrap();
        assert!(det.uncertainty.iter().all(|&u| u.abs() < 1e-15));
        for (a, b) in det.mean_probs.iter().zip(&base.mean_probs) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-15);
            }
        }
        assert_eq!(twins.single_best().members[0].fold, 0);
    }

    #[test]
    fn disagreeing_members_pool_to_quarter_variance() {
        let one = |p: Vec<f64>| UncertaintyReport::from_parts(vec![p], vec![0.0], 0.8).unwrap();
        let r = pool_members(&[one(vec![1.0, 0.0]), one(vec![0.0, 1.0])], &[0.5, 0.5], 0.8).unwrap();
        assert_eq!(r.mean_probs[0], vec![0.5, 0.5]);
        assert_eq!(r.uncertainty[0], 0.25);
        assert!(pool_members(&[one(vec![1.0, 0.0])], &[0.5, 0.5], 0.8).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = TrainConfig::default();
        let m = Model::init(&cfg.model, &[4], 8, 3).unwrap();
        let ens = Ensemble::new(vec![member(&m, 0.7, 0), member(&m, 0.6, 1)]).unwrap();
        let ck = Checkpoint::from_ensemble(&ens, &cfg, &[4], 8, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let maps = vec![crate::nn::layers::normal(&mut rng_for(2, &[]), &[2, 4, 7, 7], 1.0)];
        let a = ens.predict(&maps, &[0, 0], 4, Some(1), 0.8).unwrap();
        let b = back.to_ensemble().unwrap().predict(&maps, &[0, 0], 4, Some(1), 0.8).unwrap();
        assert_eq!(a, b);
        assert!(back.check_backbones(&["tiny_test".into()], cfg.model.tiny_dim).is_ok());
        assert!(back.check_backbones(&["densenet201".into()], cfg.model.tiny_dim).is_err());
    }
}
