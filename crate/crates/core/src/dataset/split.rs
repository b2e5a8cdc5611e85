//! Stratified train/test and k-fold splitting keyed on class × magnification.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;

use super::DatasetIndex;
use crate::error::{HistoError, Result};
use crate::rng::{hash_str, rng_for};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Image-level stratified random split.
    #[default]
    Image,
    /// Whole patients are assigned to one side; stratified on subtype only.
    PatientDisjoint,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Fold {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
}

#[derive(Clone, Debug)]
pub struct KFold {
    pub folds: Vec<Fold>,
    pub warnings: Vec<String>,
    /// False when folds fell back to subtype-only stratification.
    pub stratified_on_stratum: bool,
}

fn subset(index: &DatasetIndex, members: &[usize]) -> DatasetIndex {
    let mut members = members.to_vec();
    members.sort_unstable();
    DatasetIndex {
        samples: members.iter().map(|&i| index.samples[i].clone()).collect(),
        normalization: index.normalization.clone(),
    }
}

fn group_by(index: &DatasetIndex, key: impl Fn(usize) -> String) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..index.len() {
        groups.entry(key(i)).or_default().push(i);
    }
    groups
}

/// Image-level stratified split; see [`stratified_split_with`].
pub fn stratified_split(index: &DatasetIndex, test_fraction: f64, seed: u64) -> Result<Split> {
    stratified_split_with(index, test_fraction, seed, SplitMode::Image)
}

/// Splits `index` so every stratum contributes `floor` or `ceil` of
/// `test_fraction × size` test samples, with the overall test count equal to
/// `ceil(test_fraction × N)` over strata that can be split. Strata with a
/// single sample stay in train.
pub fn stratified_split_with(index: &DatasetIndex, test_fraction: f64, seed: u64, mode: SplitMode) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(HistoError::invalid(format!("test_fraction {test_fraction} must lie in (0, 1)")));
    }
    match mode {
        SplitMode::Image => image_level_split(index, test_fraction, seed),
        SplitMode::PatientDisjoint => patient_level_split(index, test_fraction, seed),
    }
}

fn image_level_split(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<Split> {
    let mut warnings = Vec::new();
    let groups = group_by(index, |i| index.samples[i].stratum_key());
    let mut train = Vec::new();
    let mut eligible: Vec<(&String, &Vec<usize>)> = Vec::new();
    for (key, members) in &groups {
        if members.len() < 2 {
            let msg = format!("stratum {key} has a single sample; kept in train");
            warn!("{msg}");
            warnings.push(msg);
            train.extend_from_slice(members);
        } else {
            eligible.push((key, members));
        }
    }

    let total: usize = eligible.iter().map(|(_, m)| m.len()).sum();
    let target = ((fraction * total as f64) - 1e-9).ceil().max(0.0) as usize;
    let quotas: Vec<f64> = eligible.iter().map(|(_, m)| fraction * m.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut extra = target.saturating_sub(counts.iter().sum());

    // Largest remainders first; equal remainders in seeded random order.
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x5eed]));
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap()
    });
    for &s in &order {
        if extra == 0 {
            break;
        }
        if counts[s] + 1 < eligible[s].1.len() {
            counts[s] += 1;
            extra -= 1;
        }
    }

    let mut test = Vec::new();
    for ((key, members), &n_test) in eligible.iter().zip(&counts) {
        let n_test = n_test.min(members.len() - 1);
        let mut shuffled = members.to_vec();
        shuffled.shuffle(&mut rng_for(seed, &[hash_str(key)]));
        test.extend_from_slice(&shuffled[..n_test]);
        train.extend_from_slice(&shuffled[n_test..]);
    }
    Ok(Split {
        train: subset(index, &train),
        test: subset(index, &test),
        warnings,
    })
}

fn patient_level_split(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<Split> {
    let mut warnings = Vec::new();
    let by_subtype = group_by(index, |i| index.samples[i].subtype.index().to_string());
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (key, members) in &by_subtype {
        let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in members {
            patients.entry(index.samples[i].patient_id.as_str()).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = patients.into_values().collect();
        if groups.len() < 2 {
            let msg = format!("subtype {key} has a single patient; kept in train");
            warn!("{msg}");
            warnings.push(msg);
            train.extend(groups.into_iter().flatten());
            continue;
        }
        groups.shuffle(&mut rng_for(seed, &[hash_str(key), 0x9a7]));
        let quota = (fraction * members.len() as f64).round() as usize;
        let mut taken = 0;
        for (gi, g) in groups.iter().enumerate() {
            let last_patient = gi + 1 == groups.len();
            if taken < quota && !last_patient {
                taken += g.len();
                test.extend_from_slice(g);
            } else {
                train.extend_from_slice(g);
            }
        }
    }
    Ok(Split {
        train: subset(index, &train),
        test: subset(index, &test),
        warnings,
    })
}

/// Stratified k-fold split. Members of each stratum are shuffled and dealt
/// round-robin across folds, continuing the deal across strata so fold sizes
/// differ by at most one.
pub fn kfold_split(train: &DatasetIndex, k: usize, seed: u64) -> Result<KFold> {
    if k < 2 {
        return Err(HistoError::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if train.len() < k {
        return Err(HistoError::invalid(format!(
            "cannot split {} samples into {k} folds",
            train.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut groups = group_by(train, |i| train.samples[i].stratum_key());
    let smallest = groups.values().map(Vec::len).min().unwrap_or(0);
    let stratified_on_stratum = smallest >= k;
    if !stratified_on_stratum {
        let msg = format!(
            "smallest stratum has {smallest} samples < k={k}; stratifying folds on subtype only"
        );
        warn!("{msg}");
        warnings.push(msg);
        groups = group_by(train, |i| train.samples[i].subtype.index().to_string());
    }

    let mut assignment = vec![0usize; train.len()];
    let mut pos = 0usize;
    for (key, members) in &groups {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng_for(seed, &[hash_str(key), 0xf01d]));
        for i in shuffled {
            assignment[i] = pos % k;
            pos += 1;
        }
    }

    let folds = (0..k)
        .map(|f| {
            let (val, tr): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| assignment[i] == f);
            Fold {
                train: subset(train, &tr),
                val: subset(train, &val),
            }
        })
        .collect();
    Ok(KFold {
        folds,
        warnings,
        stratified_on_stratum,
    })
}
