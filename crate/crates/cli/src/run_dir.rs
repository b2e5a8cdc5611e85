//! Fixed run-directory layout and the single-writer lock.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use histo_core::{HistoError, Result};

pub const SUBDIRS: [&str; 5] = ["manifests", "checkpoints", "reports", "figures", "logs"];
const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<()> {
        for d in SUBDIRS {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| HistoError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.manifests().join("split.tsv")
    }

    pub fn normalization(&self) -> PathBuf {
        self.manifests().join("normalization.json")
    }

    pub fn folds_manifest(&self, run: &str) -> PathBuf {
        self.manifests().join(format!("folds_{run}.tsv"))
    }

    pub fn checkpoint(&self, run: &str) -> PathBuf {
        self.checkpoints().join(format!("{run}.json"))
    }

    pub fn fold_state(&self, run: &str, fold: usize) -> PathBuf {
        self.checkpoints().join(run).join(format!("fold_{fold}.json"))
    }

    pub fn train_log(&self, run: &str) -> PathBuf {
        self.logs().join(format!("{run}_train.jsonl"))
    }

    pub fn epoch0_log(&self, run: &str) -> PathBuf {
        self.logs().join(format!("{run}_epoch0.json"))
    }

    pub fn report(&self, run: &str) -> PathBuf {
        self.reports().join(format!("{run}.json"))
    }

    pub fn samples_table(&self, run: &str) -> PathBuf {
        self.reports().join(samples_table_name(run))
    }

    pub fn embeddings(&self, run: &str) -> PathBuf {
        self.reports().join(format!("{run}_embeddings.tsv"))
    }

    /// Names of the evaluated runs, in protocol order.
    pub fn run_index(&self) -> PathBuf {
        self.reports().join("runs.json")
    }

    pub fn xai_records(&self) -> PathBuf {
        self.reports().join("xai_records.tsv")
    }

    pub fn xai_summary(&self) -> PathBuf {
        self.reports().join("xai_summary.tsv")
    }

    pub fn heatmaps(&self) -> PathBuf {
        self.figures().join("heatmaps")
    }

    /// Takes the directory's lock; it is released when the guard drops.
    pub fn lock(&self) -> Result<RunLock> {
        std::fs::create_dir_all(&self.root).map_err(|e| HistoError::io(&self.root, e))?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HistoError::Config(format!(
                "run directory {} is locked by another command (delete {} if it is stale)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(HistoError::io(&path, e)),
        }
    }
}

pub fn samples_table_name(run: &str) -> String {
    format!("{run}_samples.tsv")
}

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
