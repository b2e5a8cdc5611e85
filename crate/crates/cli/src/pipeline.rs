//! The five commands as library functions over a run directory.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use histo_core::backbone::{BackboneSet, FeatureCache, Transform};
use histo_core::dataset::manifest::{read_manifest, write_manifest};
use histo_core::dataset::{
    compute_normalization_stats, generate_synthetic_dataset, kfold_split, preprocess_sample, scan_breakhis,
    stratified_split_with, DatasetIndex, NormalizationStats, Split, N_SUBTYPES,
};
use histo_core::evaluation::{
    embeddings_tsv, evaluate_run, export_embeddings, parse_sample_table, protocol_runs, sample_table_tsv,
    sha256_hex, EvalReport, EvalSettings, ProtocolRun,
};
use histo_core::interpretability::{
    occlusion_map, select_xai_cohort, summarize_xai, xai_records_tsv, xai_summary_tsv, EnsembleImageModel, XaiCell,
    XaiRecord,
};
use histo_core::training::{read_json, write_json, Checkpoint, Ensemble, FoldState, Subset, TrainContext};
use histo_core::{HistoError, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::plots;
use crate::run_dir::{samples_table_name, RunDir};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HistoError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| HistoError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HistoError::io(path, e))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| HistoError::io(path, e))?))
}

/// Digest of the configuration without its output section, which only
/// decides where artifacts go.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output = Default::default();
    Ok(sha256_hex(c.to_toml()?.as_bytes()))
}

/// BreaKHis scan when a root is configured, the synthetic generator otherwise.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetIndex> {
    let mags = cfg.magnifications()?;
    let index = match &cfg.dataset.root {
        Some(root) => {
            let report = scan_breakhis(root)?;
            for w in &report.warnings {
                warn!("{w}");
            }
            report.index.filter_magnifications(&mags)
        }
        None => generate_synthetic_dataset(cfg.dataset.synthetic_per_cell, &mags, cfg.dataset.seed)?,
    };
    if index.is_empty() {
        return Err(HistoError::Config("the dataset has no images at the configured magnifications".into()));
    }
    Ok(index)
}

fn runs_for(cfg: &ExperimentConfig, split: &Split) -> Result<Vec<ProtocolRun>> {
    let t2 = histo_core::dataset::Magnification::new(cfg.eval.type2_train_mag)?;
    protocol_runs(cfg.eval.protocol, split, t2, cfg.test_mags()?.as_deref())
}

#[derive(Clone, Debug)]
pub struct PrepareOutcome {
    pub split: Split,
    pub summary: String,
    /// Manifest file name → SHA-256.
    pub digests: BTreeMap<String, String>,
}

pub fn prepare(cfg: &ExperimentConfig, run: &RunDir) -> Result<PrepareOutcome> {
    run.create()?;
    let index = load_dataset(cfg)?;
    let split = stratified_split_with(&index, cfg.dataset.test_fraction, cfg.dataset.seed, cfg.dataset.split_mode)?;
    for w in &split.warnings {
        warn!("{w}");
    }
    write_manifest(&run.split_manifest(), &[("train", &split.train), ("test", &split.test)])?;
    let stats = compute_normalization_stats(&split.train)?;
    write_json(&run.normalization(), &stats)?;
    let mut written = vec![run.split_manifest(), run.normalization()];
    for r in runs_for(cfg, &split)? {
        let kf = kfold_split(&r.train, cfg.train.k_folds, cfg.dataset.seed)?;
        let roles: Vec<String> = (0..kf.folds.len()).map(|k| format!("fold{k}_val")).collect();
        let groups: Vec<(&str, &DatasetIndex)> = roles.iter().map(String::as_str).zip(kf.folds.iter().map(|f| &f.val)).collect();
        write_manifest(&run.folds_manifest(&r.name), &groups)?;
        written.push(run.folds_manifest(&r.name));
    }
    let summary = format!(
        "{}train\t\t\t{}\ntest\t\t\t{}\n",
        index.count_summary(),
        split.train.len(),
        split.test.len()
    );
    let summary_path = run.manifests().join("summary.tsv");
    write_text(&summary_path, &summary)?;
    written.push(summary_path);
    let mut digests = BTreeMap::new();
    for p in written {
        digests.insert(p.file_name().unwrap().to_string_lossy().into_owned(), file_digest(&p)?);
    }
    Ok(PrepareOutcome { split, summary, digests })
}

/// Train/test halves and normalization written by `prepare`.
pub fn load_split(run: &RunDir) -> Result<(Split, NormalizationStats)> {
    let path = run.split_manifest();
    if !path.is_file() || !run.normalization().is_file() {
        return Err(HistoError::Config(format!(
            "no split manifest under {}; run `histo prepare` first",
            run.manifests().display()
        )));
    }
    let split = Split {
        train: read_manifest(&path, "train")?,
        test: read_manifest(&path, "test")?,
        warnings: Vec::new(),
    };
    let stats: NormalizationStats = read_json(&run.normalization())?;
    stats.validate()?;
    Ok((split, stats))
}

/// Objective of a freshly initialized fold model on its training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epoch0 {
    pub fold: usize,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub val_f1: f64,
    pub val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    /// Dropout-free accuracy of the last epoch's weights on the fold's training data.
    pub final_train_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run: String,
    pub folds: Vec<FoldSummary>,
    pub epoch0: Vec<Epoch0>,
    pub ensemble: Ensemble,
    pub checkpoint: PathBuf,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HistoError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| HistoError::io(path, e))
}

/// Trains one ensemble per protocol run. With `resume`, fold states saved
/// after each epoch are picked up where they stopped.
pub fn train(cfg: &ExperimentConfig, run: &RunDir, resume: bool) -> Result<Vec<TrainOutcome>> {
    let (split, stats) = load_split(run)?;
    run.create()?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let runs = runs_for(cfg, &split)?;
    let seed = cfg.dataset.seed;
    let set = BackboneSet::build(&tcfg.model.backbones, tcfg.model.tiny_dim, seed)?;
    let transforms: &[Transform] = if tcfg.effective().loss.alpha[3] > 0.0 {
        &Transform::ALL
    } else {
        &[Transform::Identity]
    };
    let mut cache = FeatureCache::new(transforms);
    for r in &runs {
        cache.fill(&set, &r.train, &stats)?;
    }
    info!("encoded {} training images", cache.len());
    let dims = set.dims();
    let mut outcomes = Vec::with_capacity(runs.len());
    for r in &runs {
        let ctx = TrainContext::new(&tcfg, &cache, &dims, N_SUBTYPES)?;
        let kf = kfold_split(&r.train, tcfg.k_folds, seed)?;
        let mut epoch0 = Vec::with_capacity(kf.folds.len());
        for (k, fold) in kf.folds.iter().enumerate() {
            let sub = Subset::from_index(&fold.train);
            let (total, comps) = ctx.evaluate_objective(&ctx.initial_model(k, &sub)?, &sub)?;
            epoch0.push(Epoch0 {
                fold: k,
                total,
                components: histo_core::losses::COMPONENTS
                    .iter()
                    .zip(comps)
                    .map(|(n, v)| (n.to_string(), v))
                    .collect(),
            });
        }
        write_json(&run.epoch0_log(&r.name), &epoch0)?;

        let mut states = BTreeMap::new();
        if resume {
            for k in 0..kf.folds.len() {
                let p = run.fold_state(&r.name, k);
                if p.is_file() {
                    let s: FoldState = read_json(&p)?;
                    info!("{}: resuming fold {k} at epoch {}", r.name, s.epoch_next);
                    states.insert(k, s);
                }
            }
        } else {
            let dir = run.checkpoints().join(&r.name);
            if dir.is_dir() {
                std::fs::remove_dir_all(&dir).map_err(|e| HistoError::io(&dir, e))?;
            }
            let log = run.train_log(&r.name);
            if log.is_file() {
                std::fs::remove_file(&log).map_err(|e| HistoError::io(&log, e))?;
            }
        }
        let name = r.name.clone();
        let mut on_epoch = |s: &FoldState| -> Result<()> {
            write_json(&run.fold_state(&name, s.fold), s)?;
            if let Some(rec) = s.history.last() {
                append_line(&run.train_log(&name), &serde_json::to_string(rec)?)?;
            }
            Ok(())
        };
        let (ensemble, fold_outcomes) = ctx.train_ensemble(&r.train, &states, &mut on_epoch)?;
        let ckpt = Checkpoint::from_ensemble(&ensemble, &tcfg, &dims, N_SUBTYPES, Some(stats.clone()))?;
        let path = run.checkpoint(&r.name);
        ckpt.save(&path)?;
        let folds = fold_outcomes
            .iter()
            .map(|o| FoldSummary {
                fold: o.fold,
                val_f1: o.val_f1,
                val_accuracy: o.val_accuracy,
                best_epoch: o.best_epoch,
                epochs_run: o.history.len(),
                final_train_accuracy: o.history.last().map(|h| h.train_eval_accuracy),
            })
            .collect();
        outcomes.push(TrainOutcome {
            run: r.name.clone(),
            folds,
            epoch0,
            ensemble,
            checkpoint: path,
        });
    }
    Ok(outcomes)
}

fn load_checkpoint(cfg: &ExperimentConfig, run: &RunDir, name: &str) -> Result<(Checkpoint, String)> {
    let path = run.checkpoint(name);
    if !path.is_file() {
        return Err(HistoError::Checkpoint(format!(
            "no checkpoint at {}; run `histo train` first",
            path.display()
        )));
    }
    let digest = file_digest(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.check_backbones(&cfg.model.backbones, cfg.model.tiny_dim)?;
    Ok((ckpt, digest))
}

/// Scores every protocol run and writes its report, per-sample table and embeddings.
pub fn evaluate(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<EvalReport>> {
    let (split, stats) = load_split(run)?;
    run.create()?;
    let settings = EvalSettings {
        passes: cfg.eval.passes,
        seed: cfg.dataset.seed,
        triage_threshold: cfg.eval.triage_threshold,
    };
    let cfg_digest = config_digest(cfg)?;
    let mut reports = Vec::new();
    for r in runs_for(cfg, &split)? {
        let (ckpt, ckpt_digest) = load_checkpoint(cfg, run, &r.name)?;
        let norm = ckpt.normalization.clone().unwrap_or_else(|| stats.clone());
        let set = BackboneSet::build(&ckpt.backbones, ckpt.tiny_dim, ckpt.backbone_seed)?;
        let mut cache = FeatureCache::new(&[Transform::Identity]);
        cache.fill(&set, &r.test, &norm)?;
        let ensemble = ckpt.to_ensemble()?;
        let (report, rows) = evaluate_run(
            &r,
            &ensemble,
            &cache,
            &settings,
            (&cfg_digest, &ckpt_digest),
            &samples_table_name(&r.name),
        )?;
        info!(
            "{}: accuracy {:.4}, weighted F1 {:.4}, {} flagged for review",
            r.name, report.accuracy, report.weighted_f1, report.n_flagged
        );
        write_text(&run.report(&r.name), &serde_json::to_string_pretty(&report)?)?;
        write_text(&run.samples_table(&r.name), &sample_table_tsv(&rows))?;
        let best = &ensemble.members[ensemble.best_index()].model;
        let emb = export_embeddings(best, &cache, &r.test)?;
        write_text(&run.embeddings(&r.name), &embeddings_tsv(&emb))?;
        reports.push(report);
    }
    let names: Vec<&str> = reports.iter().map(|r| r.run.as_str()).collect();
    write_text(&run.run_index(), &serde_json::to_string_pretty(&names)?)?;
    Ok(reports)
}

pub fn read_run_index(run: &RunDir) -> Result<Vec<String>> {
    let p = run.run_index();
    if !p.is_file() {
        return Err(HistoError::Config(format!("no evaluation index at {}; run `histo eval` first", p.display())));
    }
    let names: Vec<String> = serde_json::from_str(&read_text(&p)?)?;
    if names.is_empty() {
        return Err(HistoError::Config("the evaluation index lists no runs".into()));
    }
    Ok(names)
}

#[derive(Clone, Debug)]
pub struct ExplainOutcome {
    pub run: String,
    pub records: Vec<XaiRecord>,
    pub summary: Vec<XaiCell>,
    pub warnings: Vec<String>,
    pub heatmaps: Vec<PathBuf>,
}

/// Occlusion analysis of a confident, stratified cohort of the first run's test set.
pub fn explain(cfg: &ExperimentConfig, run: &RunDir) -> Result<ExplainOutcome> {
    let name = read_run_index(run)?.remove(0);
    let table_path = run.samples_table(&name);
    if !table_path.is_file() {
        return Err(HistoError::Config(format!("missing per-sample table {}", table_path.display())));
    }
    let table = parse_sample_table(&read_text(&table_path)?)?;
    let confidence: HashMap<String, f64> = table.iter().map(|r| (r.id.clone(), r.confidence)).collect();
    let (split, stats) = load_split(run)?;
    let r = runs_for(cfg, &split)?
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| HistoError::Config(format!("run {name} is not part of the configured protocol")))?;
    let cohort = select_xai_cohort(
        &r.test,
        &confidence,
        cfg.eval.xai_per_cell,
        cfg.eval.xai_confidence,
        cfg.dataset.seed,
    )?;
    if cohort.samples.is_empty() {
        warn!("the XAI cohort is empty; the summary table has only absent cells");
    }
    let (ckpt, _) = load_checkpoint(cfg, run, &name)?;
    let norm = ckpt.normalization.clone().unwrap_or(stats);
    let set = BackboneSet::build(&ckpt.backbones, ckpt.tiny_dim, ckpt.backbone_seed)?;
    let ensemble = ckpt.to_ensemble()?;
    let heat_dir = run.heatmaps();
    if heat_dir.is_dir() {
        std::fs::remove_dir_all(&heat_dir).map_err(|e| HistoError::io(&heat_dir, e))?;
    }
    std::fs::create_dir_all(&heat_dir).map_err(|e| HistoError::io(&heat_dir, e))?;
    let mut records = Vec::with_capacity(cohort.samples.len());
    let mut heatmaps = Vec::with_capacity(cohort.samples.len());
    for (i, s) in cohort.samples.iter().enumerate() {
        let model = EnsembleImageModel {
            backbones: &set,
            ensemble: &ensemble,
            magnification: s.magnification,
        };
        let img = preprocess_sample(s, &norm)?.pixels;
        let res = occlusion_map(
            &model,
            &img,
            cfg.eval.occlusion_patch,
            cfg.eval.occlusion_stride,
            cfg.eval.occlusion_baseline,
        )?;
        let path = heat_dir.join(format!("{}.png", s.id));
        let raw = histo_core::dataset::preprocess::denormalize(&img, &norm);
        plots::write_heatmap(&path, &raw, &res.sensitivity_map, cfg.eval.occlusion_patch, cfg.eval.occlusion_stride)?;
        heatmaps.push(path);
        records.push(XaiRecord {
            id: s.id.clone(),
            label: s.label(),
            magnification: s.magnification.value(),
            predicted: res.predicted,
            confidence: res.base_confidence,
            s_max: res.s_max,
            mean_sensitivity: res.mean_sensitivity,
            coverage_pct: res.coverage_pct,
        });
        if (i + 1) % 10 == 0 {
            info!("occlusion maps: {}/{}", i + 1, cohort.samples.len());
        }
    }
    let labels: Vec<usize> = (0..N_SUBTYPES).collect();
    let mags: Vec<u16> = r.test_mags.iter().map(|m| m.value()).collect();
    let summary = summarize_xai(&records, &labels, &mags);
    write_text(&run.xai_records(), &xai_records_tsv(&records))?;
    write_text(&run.xai_summary(), &xai_summary_tsv(&summary))?;
    Ok(ExplainOutcome {
        run: name,
        records,
        summary,
        warnings: cohort.warnings,
        heatmaps,
    })
}

/// Regenerates the five figures of the first evaluated run.
pub fn plot(run: &RunDir) -> Result<Vec<PathBuf>> {
    let index = run.run_index();
    let names = if index.is_file() { read_run_index(run)? } else { Vec::new() };
    let name = names.first().cloned().unwrap_or_default();
    let needed = if name.is_empty() {
        vec![index]
    } else {
        vec![run.report(&name), run.samples_table(&name), run.embeddings(&name)]
    };
    let missing: Vec<String> = needed
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(HistoError::Config(format!("missing artifacts: {}", missing.join(", "))));
    }
    let report: EvalReport = serde_json::from_str(&read_text(&run.report(&name))?)?;
    let rows = parse_sample_table(&read_text(&run.samples_table(&name))?)?;
    let emb = histo_core::evaluation::parse_embeddings(&read_text(&run.embeddings(&name))?)?;
    std::fs::create_dir_all(run.figures()).map_err(|e| HistoError::io(run.figures(), e))?;
    plots::render_all(&run.figures(), &report, &rows, &emb)
}
