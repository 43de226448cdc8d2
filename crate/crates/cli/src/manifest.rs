//! `manifest.json`: what a single-threaded rerun needs to reproduce a run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use heat_core::dataset::InteractionSet;
use heat_core::evaluator::MetricsReport;

use crate::config::RunConfig;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub bytes: u64,
    /// SHA-256 over `blob <len>\0<content>`, the git object hash of the file.
    pub blob_sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> anyhow::Result<Self> {
        let content = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", content.len()).as_bytes());
        h.update(&content);
        Ok(InputFile {
            path: path.to_path_buf(),
            bytes: content.len() as u64,
            blob_sha256: hex::encode(h.finalize()),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetShape {
    pub users: usize,
    pub items: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub heat_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub train: InputFile,
    pub test: InputFile,
    pub dataset: DatasetShape,
    pub resumed_from: Option<InputFile>,
    pub start_epoch: usize,
    pub epochs_completed: Option<usize>,
    pub final_metrics: Option<MetricsReport>,
}

impl Manifest {
    pub fn new(
        cfg: &RunConfig,
        train: &InteractionSet,
        test: &InteractionSet,
        resume: Option<&Path>,
        start_epoch: usize,
    ) -> anyhow::Result<Self> {
        Ok(Manifest {
            heat_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.train.seed,
            config: cfg.clone(),
            train: InputFile::hash(cfg.train_path()?)?,
            test: InputFile::hash(cfg.test_path()?)?,
            dataset: DatasetShape {
                users: train.num_users(),
                items: train.num_items(),
                train_pairs: train.num_pairs(),
                test_pairs: test.num_pairs(),
            },
            resumed_from: resume.map(InputFile::hash).transpose()?,
            start_epoch,
            epochs_completed: None,
            final_metrics: None,
        })
    }

    pub fn finish(&mut self, epochs_completed: usize, metrics: &MetricsReport) {
        self.epochs_completed = Some(epochs_completed);
        self.final_metrics = Some(*metrics);
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }

    /// Epochs recorded by the manifest sitting next to `checkpoint`.
    pub fn epochs_completed_near(checkpoint: &Path) -> anyhow::Result<usize> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let path = dir.join(FILE_NAME);
        let text = std::fs::read_to_string(&path).with_context(|| {
            format!("no --start-epoch given and cannot read {}", path.display())
        })?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("invalid {}", path.display()))?;
        match m.epochs_completed {
            Some(e) => Ok(e),
            None => bail!("{} records an unfinished run; pass --start-epoch", path.display()),
        }
    }
}
