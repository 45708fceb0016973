//! Layout of a run directory.
//!
//! ```text
//! RUN_SCHEMA                       schema tag
//! config.toml                      effective configuration
//! prepared/<dataset>/manifest.json image paths + cached binary masks
//! prepared/<dataset>/split.json
//! prepared/<dataset>/masks/*.png
//! train/model.safetensors          final weights
//! train/best.safetensors           weights at the best validation epoch
//! train/epochs.csv
//! train/summary.json
//! eval/<dataset>.json              own test split
//! crosseval/<dataset>.json         entire foreign dataset
//! results.csv results.json curves.png curves.csv gallery/
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const SCHEMA_FILE: &str = "RUN_SCHEMA";
pub const SCHEMA_TAG: &str = "roadseg-run/1";

#[derive(Debug, Clone)]
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

    /// Creates the directory and its schema tag, or checks the tag of an
    /// existing run.
    pub fn init(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        let tag_path = self.root.join(SCHEMA_FILE);
        match fs::read_to_string(&tag_path) {
            Ok(tag) if tag.trim() == SCHEMA_TAG => Ok(()),
            Ok(tag) => Err(CliError::Config(format!(
                "{} was written with run schema `{}`, this build reads `{SCHEMA_TAG}`",
                self.root.display(),
                tag.trim()
            ))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(&tag_path, format!("{SCHEMA_TAG}\n")).map_err(|e| CliError::io(&tag_path, e))
            }
            Err(e) => Err(CliError::io(&tag_path, e)),
        }
    }

    /// Checks the schema tag without creating anything.
    pub fn check(&self) -> Result<(), CliError> {
        let tag_path = self.root.join(SCHEMA_FILE);
        let tag = fs::read_to_string(&tag_path).map_err(|_| {
            CliError::Runtime(format!("{} is not a run directory (no {SCHEMA_FILE})", self.root.display()))
        })?;
        if tag.trim() != SCHEMA_TAG {
            return Err(CliError::Config(format!(
                "run schema `{}` is not supported (expected `{SCHEMA_TAG}`)",
                tag.trim()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn prepared(&self, dataset: &str) -> PathBuf {
        self.root.join("prepared").join(dataset)
    }

    pub fn manifest(&self, dataset: &str) -> PathBuf {
        self.prepared(dataset).join("manifest.json")
    }

    pub fn split(&self, dataset: &str) -> PathBuf {
        self.prepared(dataset).join("split.json")
    }

    pub fn masks(&self, dataset: &str) -> PathBuf {
        self.prepared(dataset).join("masks")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.train_dir().join("model.safetensors")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.train_dir().join("best.safetensors")
    }

    pub fn epochs(&self) -> PathBuf {
        self.train_dir().join("epochs.csv")
    }

    pub fn train_summary(&self) -> PathBuf {
        self.train_dir().join("summary.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn crosseval_dir(&self) -> PathBuf {
        self.root.join("crosseval")
    }

    pub fn gallery(&self) -> PathBuf {
        self.root.join("gallery")
    }
}
