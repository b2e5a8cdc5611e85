//! Tab-separated split manifests, one record per sample.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetIndex, Magnification, SampleDescriptor, SampleSource, Subtype};
use crate::error::{HistoError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    source: String,
    subtype: usize,
    magnification: u16,
    patient_id: String,
    stratum_key: String,
    role: String,
}

/// Serializes `(role, index)` groups in order.
pub fn manifest_to_string(groups: &[(&str, &DatasetIndex)]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    for (role, index) in groups {
        for s in &index.samples {
            w.serialize(Record {
                id: s.id.clone(),
                source: s.source.to_string(),
                subtype: s.subtype.index(),
                magnification: s.magnification.value(),
                patient_id: s.patient_id.clone(),
                stratum_key: s.stratum_key(),
                role: role.to_string(),
            })
            .map_err(|e| HistoError::Serde(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| HistoError::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HistoError::Serde(e.to_string()))
}

pub fn write_manifest(path: &Path, groups: &[(&str, &DatasetIndex)]) -> Result<()> {
    let text = manifest_to_string(groups)?;
    std::fs::write(path, text).map_err(|e| HistoError::io(path, e))
}

/// Reads a manifest and returns the samples carrying `role`.
pub fn read_manifest(path: &Path, role: &str) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| HistoError::io(path, e))?;
    parse_manifest(&text, role).map_err(|e| HistoError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_manifest(text: &str, role: &str) -> Result<DatasetIndex> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
    let mut samples = Vec::new();
    for rec in r.deserialize::<Record>() {
        let rec = rec.map_err(|e| HistoError::Serde(e.to_string()))?;
        if rec.role != role {
            continue;
        }
        let desc = SampleDescriptor {
            id: rec.id,
            source: SampleSource::parse(&rec.source)?,
            subtype: Subtype::new(rec.subtype)?,
            magnification: Magnification::new(rec.magnification)?,
            patient_id: rec.patient_id,
        };
        if desc.stratum_key() != rec.stratum_key {
            return Err(HistoError::invalid(format!(
                "sample {} has stratum key {} but subtype/magnification give {}",
                desc.id,
                rec.stratum_key,
                desc.stratum_key()
            )));
        }
        samples.push(desc);
    }
    Ok(DatasetIndex::new(samples))
}
