//! Occlusion sensitivity maps, their summary metrics and the XAI cohort.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSet;
use crate::dataset::{DatasetIndex, Magnification, SampleDescriptor, Subtype};
use crate::error::{HistoError, Result};
use crate::rng::{hash_str, rng_for};
use crate::training::Ensemble;
use crate::uncertainty::argmax;

pub const DEFAULT_PATCH: usize = 32;
pub const DEFAULT_STRIDE: usize = 16;
/// Coverage threshold as a fraction of the map's peak.
pub const COVERAGE_FRACTION: f64 = 0.2;
pub const DEFAULT_COHORT_PER_CELL: usize = 10;
pub const DEFAULT_COHORT_CONFIDENCE: f64 = 0.7;

/// Anything that maps a batch of `C×H×W` images to class probabilities.
pub trait ProbabilityModel {
    fn probabilities(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>>;
}

/// Frozen extractors plus a trained ensemble, dropout off.
pub struct EnsembleImageModel<'a> {
    pub backbones: &'a BackboneSet,
    pub ensemble: &'a Ensemble,
    pub magnification: Magnification,
}

impl ProbabilityModel for EnsembleImageModel<'_> {
    fn probabilities(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let extracted: Vec<_> = images.iter().map(|x| self.backbones.extract_one(x)).collect();
        let maps = (0..self.backbones.backbones().len())
            .map(|b| {
                let views: Vec<_> = extracted.iter().map(|e| e[b].view().insert_axis(Axis(0))).collect();
                ndarray::concatenate(Axis(0), &views)
                    .map(|a| a.mapv(f64::from).into_dyn())
                    .map_err(|e| HistoError::invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mags = vec![self.magnification.ordinal(); images.len()];
        Ok(self.ensemble.predict(&maps, &mags, 1, None, 0.5)?.mean_probs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMetrics {
    pub s_max: f64,
    pub mean_sensitivity: f64,
    pub coverage_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionResult {
    /// One cell per window position, row-major by window origin.
    pub sensitivity_map: Array2<f64>,
    pub s_max: f64,
    pub mean_sensitivity: f64,
    pub coverage_pct: f64,
    pub base_confidence: f64,
    pub predicted: usize,
}

/// Window origins along one axis: `0, stride, ...` while the window fits.
pub fn window_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..=extent - patch).step_by(stride).collect()
}

/// Copy of `x` with the window at `(y, x)` set to `baseline` in every channel.
pub fn occlude(x: &Array3<f32>, y0: usize, x0: usize, patch: usize, baseline: f32) -> Array3<f32> {
    let mut out = x.clone();
    out.slice_mut(ndarray::s![.., y0..y0 + patch, x0..x0 + patch]).fill(baseline);
    out
}

/// Windows evaluated per model call.
const OCCLUSION_BATCH: usize = 32;

/// Slides a `patch×patch` window at `stride` and records the clamped drop in
/// the probability of the unoccluded prediction.
pub fn occlusion_map(
    model: &dyn ProbabilityModel,
    x: &Array3<f32>,
    patch: usize,
    stride: usize,
    baseline: f32,
) -> Result<OcclusionResult> {
    let (_, h, w) = x.dim();
    if patch == 0 || patch > h || patch > w {
        return Err(HistoError::invalid(format!("patch {patch} does not fit a {h}×{w} image")));
    }
    if stride == 0 {
        return Err(HistoError::invalid("stride must be at least 1"));
    }
    let base = model
        .probabilities(std::slice::from_ref(x))?
        .pop()
        .ok_or_else(|| HistoError::invalid("model returned no probabilities"))?;
    let predicted = argmax(&base);
    let p_base = base[predicted];
    let ys = window_origins(h, patch, stride);
    let xs = window_origins(w, patch, stride);
    let positions: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&xx| (y, xx))).collect();
    let mut drops = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(OCCLUSION_BATCH) {
        let images: Vec<Array3<f32>> = chunk.iter().map(|&(y, xx)| occlude(x, y, xx, patch, baseline)).collect();
        for p in model.probabilities(&images)? {
            drops.push((p_base - p[predicted]).max(0.0));
        }
    }
    let map = Array2::from_shape_vec((ys.len(), xs.len()), drops).expect("one drop per window");
    let m = relative_metrics(&map)?;
    Ok(OcclusionResult {
        sensitivity_map: map,
        s_max: m.s_max,
        mean_sensitivity: m.mean_sensitivity,
        coverage_pct: m.coverage_pct,
        base_confidence: p_base,
        predicted,
    })
}

/// Peak, mean and the share of cells at or above `theta`, in percent.
pub fn occlusion_metrics(map: &Array2<f64>, theta: f64) -> Result<OcclusionMetrics> {
    if map.is_empty() {
        return Err(HistoError::invalid("sensitivity map is empty"));
    }
    let s_max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_sensitivity = map.iter().sum::<f64>() / map.len() as f64;
    let covered = map.iter().filter(|&&v| v >= theta).count();
    Ok(OcclusionMetrics {
        s_max,
        mean_sensitivity,
        coverage_pct: 100.0 * covered as f64 / map.len() as f64,
    })
}

/// Metrics with `theta = COVERAGE_FRACTION · s_max`. A map without any
/// positive cell has no critical area, so its coverage is 0.
pub fn relative_metrics(map: &Array2<f64>) -> Result<OcclusionMetrics> {
    let peak = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut m = occlusion_metrics(map, COVERAGE_FRACTION * peak)?;
    if peak <= 0.0 {
        m.coverage_pct = 0.0;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub samples: Vec<SampleDescriptor>,
    pub warnings: Vec<String>,
}

/// Seeded draw of up to `n_per_cell` samples per (subtype, magnification)
/// among those whose confidence exceeds `conf_threshold`.
///
/// Every cell present in `index` is considered; a short cell yields all its
/// eligible samples and a warning.
pub fn select_xai_cohort(
    index: &DatasetIndex,
    confidence: &HashMap<String, f64>,
    n_per_cell: usize,
    conf_threshold: f64,
    seed: u64,
) -> Result<Cohort> {
    let mut cells: BTreeMap<(Subtype, Magnification), Vec<&SampleDescriptor>> = BTreeMap::new();
    for s in &index.samples {
        let entry = cells.entry((s.subtype, s.magnification)).or_default();
        let conf = confidence
            .get(&s.id)
            .ok_or_else(|| HistoError::invalid(format!("no confidence recorded for sample {}", s.id)))?;
        if *conf > conf_threshold {
            entry.push(s);
        }
    }
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for ((sub, mag), mut eligible) in cells {
        if eligible.len() < n_per_cell {
            let msg = format!(
                "cell {sub}/{mag}: only {} of {n_per_cell} requested samples exceed confidence {conf_threshold}",
                eligible.len()
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        eligible.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = rng_for(seed, &[hash_str(&crate::dataset::stratum_key(sub, mag))]);
        eligible.shuffle(&mut rng);
        let mut chosen: Vec<SampleDescriptor> = eligible.into_iter().take(n_per_cell).cloned().collect();
        chosen.sort_by(|a, b| a.id.cmp(&b.id));
        samples.extend(chosen);
    }
    Ok(Cohort { samples, warnings })
}

/// Per-sample XAI record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XaiRecord {
    pub id: String,
    pub label: usize,
    pub magnification: u16,
    pub predicted: usize,
    pub confidence: f64,
    pub s_max: f64,
    pub mean_sensitivity: f64,
    pub coverage_pct: f64,
}

/// One (subtype, magnification) cell of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XaiCell {
    pub label: usize,
    pub magnification: u16,
    pub n: usize,
    /// Mean over samples of the mean sensitivity; absent for an empty cell.
    pub mean: Option<f64>,
    /// Max over samples of the peak sensitivity.
    pub max: Option<f64>,
}

/// Mean/max summary for every (subtype, magnification) pair in `cells`.
pub fn summarize_xai(records: &[XaiRecord], labels: &[usize], mags: &[u16]) -> Vec<XaiCell> {
    let mut out = Vec::with_capacity(labels.len() * mags.len());
    for &label in labels {
        for &magnification in mags {
            let hits: Vec<&XaiRecord> = records
                .iter()
                .filter(|r| r.label == label && r.magnification == magnification)
                .collect();
            let n = hits.len();
            out.push(XaiCell {
                label,
                magnification,
                n,
                mean: (n > 0).then(|| hits.iter().map(|r| r.mean_sensitivity).sum::<f64>() / n as f64),
                max: hits.iter().map(|r| r.s_max).reduce(f64::max),
            });
        }
    }
    out
}

pub const XAI_RECORD_HEADER: &str = "id\tlabel\tmagnification\tpredicted\tconfidence\ts_max\tmean_sensitivity\tcoverage_pct";

pub fn xai_records_tsv(records: &[XaiRecord]) -> String {
    let mut out = String::from(XAI_RECORD_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id, r.label, r.magnification, r.predicted, r.confidence, r.s_max, r.mean_sensitivity, r.coverage_pct
        ));
    }
    out
}

pub fn parse_xai_records(text: &str) -> Result<Vec<XaiRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(XAI_RECORD_HEADER) {
        return Err(HistoError::invalid("XAI record table has an unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || HistoError::invalid(format!("malformed XAI row: {line}"));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(XaiRecord {
                id: f[0].to_string(),
                label: f[1].parse().map_err(|_| bad())?,
                magnification: f[2].parse().map_err(|_| bad())?,
                predicted: f[3].parse().map_err(|_| bad())?,
                confidence: num(4)?,
                s_max: num(5)?,
                mean_sensitivity: num(6)?,
                coverage_pct: num(7)?,
            })
        })
        .collect()
}

/// Summary table: one row per cell, empty fields for absent cells.
pub fn xai_summary_tsv(cells: &[XaiCell]) -> String {
    let mut out = String::from("label\tmagnification\tn\tmean\tmax\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for c in cells {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            c.label,
            c.magnification,
            c.n,
            opt(c.mean),
            opt(c.max)
        ));
    }
    out
}
