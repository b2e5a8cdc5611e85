//! Dataset ingestion: BreaKHis directory scanning, a procedural stand-in
//! dataset, z-score preprocessing, and stratified splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{HistoError, Result};

pub mod breakhis;
pub mod manifest;
pub mod preprocess;
pub mod split;
pub mod synthetic;

pub use breakhis::{scan_breakhis, ScanReport};
pub use preprocess::{
    compute_normalization_stats, compute_normalization_stats_with, load_raw, preprocess,
    preprocess_sample, NormalizationStats, RawImage,
};
pub use split::{kfold_split, stratified_split, stratified_split_with, Fold, KFold, Split, SplitMode};
pub use synthetic::{generate_synthetic_dataset, render_synthetic, texture_params, TextureParams};

pub const N_SUBTYPES: usize = 8;
/// Side length of every preprocessed image.
pub const IMAGE_SIZE: usize = 224;

pub const SUBTYPE_NAMES: [&str; N_SUBTYPES] = [
    "adenosis",
    "fibroadenoma",
    "phyllodes_tumor",
    "tubular_adenoma",
    "ductal_carcinoma",
    "lobular_carcinoma",
    "mucinous_carcinoma",
    "papillary_carcinoma",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Superclass {
    Benign,
    Malignant,
}

impl fmt::Display for Superclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Superclass::Benign => "benign",
            Superclass::Malignant => "malignant",
        })
    }
}

/// One of the eight tumor subtypes; indices 0–3 are benign, 4–7 malignant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subtype(u8);

impl Subtype {
    pub fn new(index: usize) -> Result<Self> {
        if index < N_SUBTYPES {
            Ok(Self(index as u8))
        } else {
            Err(HistoError::invalid(format!("subtype index {index} out of range 0..{N_SUBTYPES}")))
        }
    }

    pub fn all() -> impl Iterator<Item = Subtype> {
        (0..N_SUBTYPES as u8).map(Subtype)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        SUBTYPE_NAMES[self.index()]
    }

    pub fn superclass(self) -> Superclass {
        if self.0 < 4 {
            Superclass::Benign
        } else {
            Superclass::Malignant
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        SUBTYPE_NAMES.iter().position(|&n| n == lower).map(|i| Self(i as u8))
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optical magnification: 40×, 100×, 200× or 400×.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct Magnification(u16);

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification(40),
        Magnification(100),
        Magnification(200),
        Magnification(400),
    ];

    pub fn new(value: u16) -> Result<Self> {
        if Self::ALL.iter().any(|m| m.0 == value) {
            Ok(Self(value))
        } else {
            Err(HistoError::invalid(format!("unsupported magnification {value}x")))
        }
    }

    pub fn value(self) -> u16 {
        self.0
    }

    /// Position within [`Magnification::ALL`].
    pub fn ordinal(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    /// Parses folder names such as `40X` or `400x`.
    pub fn from_folder(name: &str) -> Option<Self> {
        let digits = name.strip_suffix(['X', 'x'])?;
        digits.parse::<u16>().ok().and_then(|v| Self::new(v).ok())
    }
}

impl TryFrom<u16> for Magnification {
    type Error = HistoError;
    fn try_from(v: u16) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Magnification> for u16 {
    fn from(m: Magnification) -> u16 {
        m.0
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x", self.0)
    }
}

/// Where a sample's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleSource {
    File(PathBuf),
    Synthetic { seed: u64 },
}

impl fmt::Display for SampleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSource::File(p) => write!(f, "{}", p.display()),
            SampleSource::Synthetic { seed } => write!(f, "synthetic:{seed}"),
        }
    }
}

impl SampleSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic:") {
            Some(seed) => seed
                .parse()
                .map(|seed| SampleSource::Synthetic { seed })
                .map_err(|_| HistoError::invalid(format!("bad synthetic source '{s}'"))),
            None => Ok(SampleSource::File(PathBuf::from(s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub id: String,
    pub source: SampleSource,
    pub subtype: Subtype,
    pub magnification: Magnification,
    pub patient_id: String,
}

impl SampleDescriptor {
    pub fn superclass(&self) -> Superclass {
        self.subtype.superclass()
    }

    pub fn label(&self) -> usize {
        self.subtype.index()
    }

    pub fn stratum_key(&self) -> String {
        stratum_key(self.subtype, self.magnification)
    }
}

/// Injective encoding of (subtype, magnification): `"<subtype_index>_<magnification>"`.
pub fn stratum_key(subtype: Subtype, magnification: Magnification) -> String {
    format!("{}_{}", subtype.index(), magnification.value())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub samples: Vec<SampleDescriptor>,
    pub normalization: Option<NormalizationStats>,
}

impl DatasetIndex {
    pub fn new(samples: Vec<SampleDescriptor>) -> Self {
        Self {
            samples,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts per (subtype, magnification) cell.
    pub fn cell_counts(&self) -> BTreeMap<(Subtype, Magnification), usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry((s.subtype, s.magnification)).or_insert(0) += 1;
        }
        counts
    }

    pub fn superclass_counts(&self) -> BTreeMap<Superclass, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.superclass()).or_insert(0) += 1;
        }
        counts
    }

    pub fn magnification_counts(&self) -> BTreeMap<Magnification, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.magnification).or_insert(0) += 1;
        }
        counts
    }

    pub fn patient_count(&self) -> usize {
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.patient_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn magnifications(&self) -> Vec<Magnification> {
        self.magnification_counts().into_keys().collect()
    }

    pub fn filter_magnifications(&self, keep: &[Magnification]) -> DatasetIndex {
        DatasetIndex {
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.magnification))
                .cloned()
                .collect(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(SampleDescriptor::label).collect()
    }

    /// Table-1-style count summary: per magnification benign/malignant/total.
    pub fn count_summary(&self) -> String {
        let mut rows: BTreeMap<Magnification, (usize, usize)> = BTreeMap::new();
        for s in &self.samples {
            let e = rows.entry(s.magnification).or_default();
            match s.superclass() {
                Superclass::Benign => e.0 += 1,
                Superclass::Malignant => e.1 += 1,
            }
        }
        let mut out = String::from("magnification\tbenign\tmalignant\ttotal\n");
        let (mut tb, mut tm) = (0, 0);
        for (m, (b, ml)) in &rows {
            out.push_str(&format!("{m}\t{b}\t{ml}\t{}\n", b + ml));
            tb += b;
            tm += ml;
        }
        out.push_str(&format!("total\t{tb}\t{tm}\t{}\n", tb + tm));
        out.push_str(&format!("patients\t\t\t{}\n", self.patient_count()));
        out
    }
}

/// A preprocessed image with its labels.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    /// `3×224×224`, z-scored per channel.
    pub pixels: Array3<f32>,
    pub subtype: Subtype,
    pub magnification: Magnification,
    pub patient_id: String,
    pub stratum_key: String,
}

impl ImageSample {
    pub fn superclass(&self) -> Superclass {
        self.subtype.superclass()
    }
}
