//! Run directories keyed by command and configuration.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{io_error, CliError};

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    key: &'a str,
    config: &'a ExperimentConfig,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<out>/<command>-<key>` and writes `run.json` into it. An
    /// existing directory is refused unless `force`, which clears it first.
    pub fn create(
        out: &Path,
        command: &str,
        cfg: &ExperimentConfig,
        force: bool,
    ) -> Result<Self, CliError> {
        let key = cfg.run_key(command);
        let path = out.join(format!("{command}-{key}"));
        if path.exists() {
            if !force {
                return Err(CliError::RunExists(path));
            }
            std::fs::remove_dir_all(&path).map_err(io_error(&path))?;
        }
        std::fs::create_dir_all(&path).map_err(io_error(&path))?;
        let record = RunRecord {
            command,
            key: &key,
            config: cfg,
        };
        let json = serde_json::to_string_pretty(&record).expect("run record serializes") + "\n";
        let run = RunDir { path };
        run.write("run.json", json)?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.file(name);
        std::fs::write(&path, contents).map_err(io_error(&path))
    }
}
