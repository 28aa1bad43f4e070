use std::fs;
use std::path::{Path, PathBuf};

use embrank_core::config::ExperimentConfig;
use embrank_core::{Error, Result};
use serde::Serialize;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.trec";
pub const FIRST_STAGE_FILE: &str = "first_stage.trec";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MODEL_FILE: &str = "model.ckpt";

/// An output directory holding the effective config next to the results.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| io(path, e))?;
        let dir = Self { path: path.to_path_buf() };
        dir.write(CONFIG_FILE, &cfg.to_toml())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, text).map_err(|e| io(&p, e))
    }

    /// Writes the report and echoes it to stdout.
    pub fn report(&self, text: &str) -> Result<()> {
        print!("{text}");
        self.write(REPORT_FILE, text)
    }

    pub fn metrics<T: Serialize>(&self, records: &[T]) -> Result<()> {
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
            text.push('\n');
        }
        self.write(METRICS_FILE, &text)
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
