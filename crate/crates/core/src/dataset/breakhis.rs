//! Directory walker for the BreaKHis layout:
//! `.../{benign,malignant}/SOB/{subtype}/{patient}/{40X,100X,200X,400X}/*.png`.

use std::path::{Path, PathBuf};

use log::warn;
use walkdir::WalkDir;

use super::{DatasetIndex, Magnification, SampleDescriptor, SampleSource, Subtype};
use crate::error::{HistoError, Result};

#[derive(Clone, Debug, Default)]
pub struct ScanReport {
    pub index: DatasetIndex,
    /// Image files under a magnification folder that was not recognized.
    pub skipped_files: usize,
    pub skipped_folders: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "tif" | "tiff")
    )
}

/// Patient id from a file name such as `SOB_B_A-14-22549AB-40-001.png`
/// (second and third dash-separated fields), falling back to the patient folder.
fn patient_id(file: &Path, patient_dir: &Path) -> String {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let parts: Vec<&str> = stem.split('-').collect();
    if parts.len() >= 5 {
        return format!("{}-{}", parts[1], parts[2]);
    }
    patient_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Walks `root` and produces one descriptor per image file. Files are visited
/// in sorted order so the index is reproducible.
pub fn scan_breakhis(root: &Path) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(HistoError::MissingRoot(root.to_path_buf()));
    }
    let mut report = ScanReport::default();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| HistoError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")),
        })?;
        let path = entry.path();
        if !entry.file_type().is_file() || !is_image(path) {
            continue;
        }
        let Some(mag_dir) = path.parent() else { continue };
        let Some(patient_dir) = mag_dir.parent() else { continue };
        let subtype = patient_dir
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .and_then(Subtype::from_name);
        let Some(subtype) = subtype else { continue };
        let mag_name = mag_dir.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(magnification) = Magnification::from_folder(mag_name) else {
            report.skipped_files += 1;
            if !report.skipped_folders.iter().any(|p| p == mag_dir) {
                report.skipped_folders.push(mag_dir.to_path_buf());
            }
            continue;
        };
        let rel = path.strip_prefix(root).unwrap_or(path);
        report.index.samples.push(SampleDescriptor {
            id: rel.to_string_lossy().replace('\\', "/"),
            source: SampleSource::File(path.to_path_buf()),
            subtype,
            magnification,
            patient_id: patient_id(path, patient_dir),
        });
    }
    if report.skipped_files > 0 {
        report.warnings.push(format!(
            "skipped {} files in {} unrecognized magnification folders",
            report.skipped_files,
            report.skipped_folders.len()
        ));
    }
    if report.index.is_empty() {
        report.warnings.push(format!("no images found under {}", root.display()));
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn touch_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(4, 4, image::Rgb([200, 100, 150])).save(path).unwrap();
    }

    #[test]
    fn walks_the_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let breast = dir.path().join("breast");
        let a = breast.join("benign/SOB/adenosis/SOB_B_A_14-22549AB");
        touch_png(&a.join("40X/SOB_B_A-14-22549AB-40-001.png"));
        touch_png(&a.join("40X/SOB_B_A-14-22549AB-40-002.png"));
        touch_png(&a.join("100X/SOB_B_A-14-22549AB-100-001.png"));
        let d = breast.join("malignant/SOB/ductal_carcinoma/SOB_M_DC_14-2523");
        touch_png(&d.join("400X/SOB_M_DC-14-2523-400-001.png"));
        touch_png(&d.join("80X/SOB_M_DC-14-2523-80-001.png"));

        let report = scan_breakhis(dir.path()).unwrap();
        let idx = &report.index;
        assert_eq!(idx.len(), 4);
        assert_eq!(report.skipped_files, 1);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(idx.patient_count(), 2);
        assert_eq!(idx.samples[0].patient_id, "14-22549AB");
        let counts = idx.superclass_counts();
        assert_eq!(counts[&super::super::Superclass::Benign], 3);
        assert_eq!(counts[&super::super::Superclass::Malignant], 1);
        assert_eq!(idx.cell_counts().values().sum::<usize>(), 4);
    }

    #[test]
    fn empty_directory_warns() {
        let dir = tempfile::tempdir().unwrap();
        let report = scan_breakhis(dir.path()).unwrap();
        assert!(report.index.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn missing_root_is_fatal() {
        let err = scan_breakhis(Path::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, HistoError::MissingRoot(_)));
    }
}
