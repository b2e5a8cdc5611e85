//! The experiment configuration file and `--set` overrides.

use std::path::{Path, PathBuf};

use histo_core::dataset::{Magnification, SplitMode};
use histo_core::evaluation::Protocol;
use histo_core::interpretability::{
    DEFAULT_COHORT_CONFIDENCE, DEFAULT_COHORT_PER_CELL, DEFAULT_PATCH, DEFAULT_STRIDE,
};
use histo_core::losses::LossWeights;
use histo_core::model::ModelConfig;
use histo_core::training::{Ablation, TrainConfig};
use histo_core::uncertainty::{DEFAULT_PASSES, DEFAULT_TRIAGE_THRESHOLD};
use histo_core::{HistoError, Result};
use serde::{Deserialize, Serialize};

/// Overrides the configured run directory when set.
pub const RUN_DIR_ENV: &str = "HISTO_MEXNET_RUN_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// BreaKHis root; synthetic data is generated when absent.
    pub root: Option<PathBuf>,
    /// Synthetic samples per (subtype, magnification) cell.
    pub synthetic_per_cell: usize,
    pub magnifications: Vec<u16>,
    pub test_fraction: f64,
    pub split_mode: SplitMode,
    /// Seed of every stochastic step in the experiment.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            synthetic_per_cell: 10,
            magnifications: Magnification::ALL.iter().map(|m| m.value()).collect(),
            test_fraction: 0.2,
            split_mode: SplitMode::Image,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub k_folds: usize,
    pub patience: usize,
    pub relation_w_same: f64,
    pub ablation: Ablation,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            k_folds: t.k_folds,
            patience: t.patience,
            relation_w_same: t.relation_w_same,
            ablation: t.ablation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: Protocol,
    pub passes: usize,
    pub triage_threshold: f64,
    pub type2_train_mag: u16,
    /// Test magnifications; empty means every eligible one.
    pub test_mags: Vec<u16>,
    pub xai_per_cell: usize,
    pub xai_confidence: f64,
    pub occlusion_patch: usize,
    pub occlusion_stride: usize,
    pub occlusion_baseline: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Type3,
            passes: DEFAULT_PASSES,
            triage_threshold: DEFAULT_TRIAGE_THRESHOLD,
            type2_train_mag: 100,
            test_mags: Vec::new(),
            xai_per_cell: DEFAULT_COHORT_PER_CELL,
            xai_confidence: DEFAULT_COHORT_CONFIDENCE,
            occlusion_patch: DEFAULT_PATCH,
            occlusion_stride: DEFAULT_STRIDE,
            occlusion_baseline: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub run_dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/desk"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

fn config_err(e: impl std::fmt::Display) -> HistoError {
    HistoError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Reads `path`, or uses the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HistoError::io(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    HistoError::Config(msg) => HistoError::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// Applies `section.key=value` overrides. Values are read as TOML scalars
    /// or arrays and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(config_err)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| HistoError::Config(format!("override '{item}' is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut node = &mut table;
            for p in parents {
                node = node
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| HistoError::Config(format!("unknown config section '{p}' in '{key}'")))?;
            }
            node.insert(last.to_string(), value);
        }
        let text = toml::to_string(&table).map_err(config_err)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let d = &self.dataset;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(HistoError::Config("dataset.test_fraction must lie in (0, 1)".into()));
        }
        if d.root.is_none() && d.synthetic_per_cell == 0 {
            return Err(HistoError::Config("dataset.synthetic_per_cell must be positive".into()));
        }
        if d.magnifications.is_empty() {
            return Err(HistoError::Config("dataset.magnifications is empty".into()));
        }
        self.magnifications()?;
        let e = &self.eval;
        if e.passes == 0 {
            return Err(HistoError::Config("eval.passes must be at least 1".into()));
        }
        if !(e.triage_threshold > 0.0 && e.triage_threshold <= 1.0) {
            return Err(HistoError::Config("eval.triage_threshold must lie in (0, 1]".into()));
        }
        Magnification::new(e.type2_train_mag).map_err(config_err)?;
        self.test_mags()?;
        if e.occlusion_patch == 0 || e.occlusion_patch > histo_core::dataset::IMAGE_SIZE || e.occlusion_stride == 0 {
            return Err(HistoError::Config("occlusion patch must lie in [1, 224] and stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.xai_confidence) {
            return Err(HistoError::Config("eval.xai_confidence must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn magnifications(&self) -> Result<Vec<Magnification>> {
        self.dataset
            .magnifications
            .iter()
            .map(|&m| Magnification::new(m).map_err(config_err))
            .collect()
    }

    /// `None` when every eligible magnification is tested.
    pub fn test_mags(&self) -> Result<Option<Vec<Magnification>>> {
        if self.eval.test_mags.is_empty() {
            return Ok(None);
        }
        self.eval
            .test_mags
            .iter()
            .map(|&m| Magnification::new(m).map_err(config_err))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: self.model.clone(),
            loss: self.loss.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            k_folds: t.k_folds,
            patience: t.patience,
            relation_w_same: t.relation_w_same,
            seed: self.dataset.seed,
            ablation: t.ablation,
        }
    }

    /// The run directory, honouring the environment override.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.run_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn non_default_values_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.root = Some(PathBuf::from("/data/BreaKHis_v1"));
        cfg.loss.alpha = [1.0, 0.3, 0.0, 0.123456789012345, 0.05, 0.1];
        cfg.train.ablation = Ablation::A3;
        cfg.eval.protocol = Protocol::Type2;
        cfg.eval.test_mags = vec![40, 400];
        cfg.model.backbones = vec!["densenet201".into(), "convnext_tiny".into()];
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[nonsense]\n").is_err());
        assert!(ExperimentConfig::from_toml("[loss]\ngama = 1.0\n").is_err());
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "train.epochs=3".into(),
                "eval.protocol=type1".into(),
                "dataset.magnifications=[40]".into(),
                "model.dropout_rate = 0.1".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.eval.protocol, Protocol::Type1);
        assert_eq!(cfg.dataset.magnifications, vec![40]);
        assert_eq!(cfg.model.dropout_rate, 0.1);
        assert!(cfg.with_overrides(&["train.nope=1".into()]).is_err());
        assert!(cfg.with_overrides(&["nope.epochs=1".into()]).is_err());
        assert!(cfg.with_overrides(&["train.epochs".into()]).is_err());
        assert!(cfg.with_overrides(&["eval.triage_threshold=0".into()]).is_err());
    }
}
