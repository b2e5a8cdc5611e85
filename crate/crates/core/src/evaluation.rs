//! Classification metrics and the three evaluation protocols.

use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{FeatureCache, Transform};
use crate::dataset::{DatasetIndex, Magnification, Split};
use crate::error::{HistoError, Result};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::training::{Ensemble, Subset};
use crate::uncertainty::{calibration, UncertaintyReport};

/// Samples per inference chunk.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub warnings: Vec<String>,
}

/// Accuracy, support-weighted precision/recall/F1 and the confusion matrix.
///
/// A class that is never predicted gets precision 0 and a warning.
pub fn compute_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(HistoError::invalid("metrics need at least one sample"));
    }
    if preds.len() != labels.len() {
        return Err(HistoError::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(HistoError::invalid(format!("class {bad} out of range for {n_classes} classes")));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let n = labels.len();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(n_classes);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
        let precision = if predicted == 0 {
            if support > 0 {
                let msg = format!("class {c} is never predicted; precision set to 0");
                warn!("{msg}");
                warnings.push(msg);
            }
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let w = support as f64 / n as f64;
        wp += w * precision;
        wr += w * recall;
        wf += w * f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
            predicted,
        });
    }
    Ok(Metrics {
        accuracy: correct as f64 / n as f64,
        weighted_precision: wp,
        weighted_recall: wr,
        weighted_f1: wf,
        confusion,
        per_class,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train and test on the same magnification, one run per magnification.
    Type1,
    /// Train on one magnification, test on each of the others.
    Type2,
    /// Train and test on the pooled magnifications.
    Type3,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Type1, Protocol::Type2, Protocol::Type3];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Type1 => "type1",
            Protocol::Type2 => "type2",
            Protocol::Type3 => "type3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| HistoError::Config(format!("unknown protocol '{s}' (expected type1, type2 or type3)")))
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One train/test pairing of a protocol.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    /// `type3`, `type1_40x`, `type2_100x_to_200x`, ...
    pub name: String,
    pub protocol: Protocol,
    pub train_mags: Vec<Magnification>,
    pub test_mags: Vec<Magnification>,
    pub train: DatasetIndex,
    pub test: DatasetIndex,
}

/// Carves the runs of `protocol` out of one stratified split.
///
/// Every run restricts the shared train and test halves to its magnifications,
/// so no test image is ever trained on under any protocol. `test_mags = None`
/// means every eligible magnification present in the split.
pub fn protocol_runs(
    protocol: Protocol,
    split: &Split,
    type2_train_mag: Magnification,
    test_mags: Option<&[Magnification]>,
) -> Result<Vec<ProtocolRun>> {
    let present = {
        let mut all = split.train.magnifications();
        all.extend(split.test.magnifications());
        all.sort_unstable();
        all.dedup();
        all
    };
    if let Some(req) = test_mags {
        if req.is_empty() {
            return Err(HistoError::Config("no test magnification requested".into()));
        }
        for m in req {
            if !present.contains(m) {
                return Err(HistoError::invalid(format!("magnification {m} is absent from the dataset")));
            }
        }
    }
    let run = |name: String, train_mags: Vec<Magnification>, test_mags: Vec<Magnification>| -> Result<ProtocolRun> {
        let train = split.train.filter_magnifications(&train_mags);
        let test = split.test.filter_magnifications(&test_mags);
        if train.is_empty() || test.is_empty() {
            return Err(HistoError::invalid(format!("protocol run {name} has an empty train or test set")));
        }
        Ok(ProtocolRun {
            name,
            protocol,
            train_mags,
            test_mags,
            train,
            test,
        })
    };
    match protocol {
        Protocol::Type1 => test_mags
            .map_or(present.clone(), <[_]>::to_vec)
            .into_iter()
            .map(|m| run(format!("type1_{m}"), vec![m], vec![m]))
            .collect(),
        Protocol::Type2 => {
            if !present.contains(&type2_train_mag) {
                return Err(HistoError::invalid(format!(
                    "training magnification {type2_train_mag} is absent from the dataset"
                )));
            }
            let targets = match test_mags {
                Some(req) => {
                    if req.contains(&type2_train_mag) {
                        return Err(HistoError::Config(format!(
                            "{type2_train_mag} is the held-in training magnification and cannot be a test magnification"
                        )));
                    }
                    req.to_vec()
                }
                None => present.iter().copied().filter(|&m| m != type2_train_mag).collect(),
            };
            if targets.is_empty() {
                return Err(HistoError::invalid("type2 needs at least one magnification besides the training one"));
            }
            targets
                .into_iter()
                .map(|m| run(format!("type2_{type2_train_mag}_to_{m}"), vec![type2_train_mag], vec![m]))
                .collect()
        }
        Protocol::Type3 => {
            let mags = test_mags.map_or(present.clone(), <[_]>::to_vec);
            Ok(vec![run("type3".into(), present, mags)?])
        }
    }
}

/// Inference settings shared by every report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub passes: usize,
    pub seed: u64,
    pub triage_threshold: f64,
}

/// One row of the per-sample table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub label: usize,
    pub magnification: u16,
    pub prediction: usize,
    pub confidence: f64,
    pub uncertainty: f64,
    pub flag: bool,
}

pub const SAMPLE_TABLE_HEADER: &str = "id\tlabel\tmagnification\tprediction\tconfidence\tuncertainty\tflag";

pub fn sample_table_tsv(rows: &[SampleRow]) -> String {
    let mut out = String::from(SAMPLE_TABLE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id, r.label, r.magnification, r.prediction, r.confidence, r.uncertainty, r.flag
        ));
    }
    out
}

pub fn parse_sample_table(text: &str) -> Result<Vec<SampleRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLE_TABLE_HEADER) {
        return Err(HistoError::invalid("per-sample table has an unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || HistoError::invalid(format!("malformed per-sample row: {line}"));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(SampleRow {
                id: f[0].to_string(),
                label: f[1].parse().map_err(|_| bad())?,
                magnification: f[2].parse().map_err(|_| bad())?,
                prediction: f[3].parse().map_err(|_| bad())?,
                confidence: f[4].parse().map_err(|_| bad())?,
                uncertainty: f[5].parse().map_err(|_| bad())?,
                flag: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: String,
    pub protocol: Protocol,
    pub train_mag: Vec<u16>,
    pub test_mag: Vec<u16>,
    pub seed: u64,
    pub passes: usize,
    pub triage_threshold: f64,
    pub n_samples: usize,
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub avg_uncertainty: f64,
    pub avg_confidence: f64,
    pub correct_confidence: Option<f64>,
    pub wrong_confidence: Option<f64>,
    pub n_flagged: usize,
    pub warnings: Vec<String>,
    pub config_digest: String,
    pub checkpoint_digest: String,
    /// Path of the per-sample table, relative to the report.
    pub per_sample: String,
}

/// Predictions of `ensemble` on `index`, in index order.
pub fn predict_index(
    ensemble: &Ensemble,
    cache: &FeatureCache,
    index: &DatasetIndex,
    settings: &EvalSettings,
) -> Result<UncertaintyReport> {
    let subset = Subset::from_index(index);
    let n_backbones = ensemble
        .members
        .first()
        .map(|m| m.model.dims.len())
        .ok_or_else(|| HistoError::invalid("ensemble has no members"))?;
    let seed = derive_seed(settings.seed, &[0xe7a1]);
    let mut parts: Vec<UncertaintyReport> = Vec::new();
    for (c, start) in (0..subset.len()).step_by(EVAL_CHUNK).enumerate() {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(subset.len())).collect();
        let chunk = subset.select(&rows);
        let maps = chunk.maps(cache, Transform::Identity, n_backbones)?;
        let chunk_seed = derive_seed(seed, &[c as u64]);
        parts.push(ensemble.predict(&maps, &chunk.magnifications, settings.passes, Some(chunk_seed), settings.triage_threshold)?);
    }
    let mut means = Vec::with_capacity(subset.len());
    let mut unc = Vec::with_capacity(subset.len());
    for p in parts {
        means.extend(p.mean_probs);
        unc.extend(p.uncertainty);
    }
    UncertaintyReport::from_parts(means, unc, settings.triage_threshold)
}

/// Scores `ensemble` on a protocol run's test set.
pub fn evaluate_run(
    run: &ProtocolRun,
    ensemble: &Ensemble,
    cache: &FeatureCache,
    settings: &EvalSettings,
    digests: (&str, &str),
    per_sample_path: &str,
) -> Result<(EvalReport, Vec<SampleRow>)> {
    let n_classes = ensemble.members[0].model.n_classes;
    let report = predict_index(ensemble, cache, &run.test, settings)?;
    let preds = report.predictions();
    let labels = run.test.labels();
    let metrics = compute_metrics(&preds, &labels, n_classes)?;
    let cal = calibration(&report.mean_probs, &labels)?;
    let rows: Vec<SampleRow> = run
        .test
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRow {
            id: s.id.clone(),
            label: labels[i],
            magnification: s.magnification.value(),
            prediction: preds[i],
            confidence: report.confidence[i],
            uncertainty: report.uncertainty[i],
            flag: report.flags[i],
        })
        .collect();
    let n = rows.len() as f64;
    Ok((
        EvalReport {
            run: run.name.clone(),
            protocol: run.protocol,
            train_mag: run.train_mags.iter().map(|m| m.value()).collect(),
            test_mag: run.test_mags.iter().map(|m| m.value()).collect(),
            seed: settings.seed,
            passes: settings.passes,
            triage_threshold: settings.triage_threshold,
            n_samples: rows.len(),
            accuracy: metrics.accuracy,
            weighted_precision: metrics.weighted_precision,
            weighted_recall: metrics.weighted_recall,
            weighted_f1: metrics.weighted_f1,
            confusion: metrics.confusion,
            per_class: metrics.per_class,
            avg_uncertainty: report.uncertainty.iter().sum::<f64>() / n,
            avg_confidence: cal.avg_confidence,
            correct_confidence: cal.correct_confidence,
            wrong_confidence: cal.wrong_confidence,
            n_flagged: report.flags.iter().filter(|&&f| f).count(),
            warnings: metrics.warnings,
            config_digest: digests.0.to_string(),
            checkpoint_digest: digests.1.to_string(),
            per_sample: per_sample_path.to_string(),
        },
        rows,
    ))
}

/// `(sample id, label, magnification, f_global)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: usize,
    pub magnification: u16,
    pub vector: Vec<f64>,
}

/// Global descriptors of every sample in `index` under `model` (no dropout).
pub fn export_embeddings(model: &Model, cache: &FeatureCache, index: &DatasetIndex) -> Result<Vec<EmbeddingRow>> {
    let subset = Subset::from_index(index);
    let mut out = Vec::with_capacity(subset.len());
    for start in (0..subset.len()).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(subset.len())).collect();
        let chunk = subset.select(&rows);
        let f = model.global_features(&chunk.maps(cache, Transform::Identity, model.dims.len())?)?;
        for (i, &r) in rows.iter().enumerate() {
            out.push(EmbeddingRow {
                id: index.samples[r].id.clone(),
                label: index.samples[r].label(),
                magnification: index.samples[r].magnification.value(),
                vector: f.row(i).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn embeddings_tsv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}", r.id, r.label, r.magnification));
        for v in &r.vector {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRow>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || HistoError::invalid(format!("malformed embedding row: {}", &line[..line.len().min(40)]));
            if f.len() < 4 {
                return Err(bad());
            }
            Ok(EmbeddingRow {
                id: f[0].to_string(),
                label: f[1].parse().map_err(|_| bad())?,
                magnification: f[2].parse().map_err(|_| bad())?,
                vector: f[3..].iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
