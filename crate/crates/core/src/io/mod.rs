//! Files: datasets, experiment configs, checkpoints and metrics tables.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod dataset;

use std::fs::{self, File, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::error::{MsrlError, Result};

pub use checkpoint::{checkpoint_from_text, checkpoint_to_text, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{load_config, DataSpec, ExperimentConfig, WorldSpec};
pub use csv::{export_metrics, metrics_to_csv, parse_metrics_csv};
pub use dataset::{dataset_from_json, dataset_to_json, load_dataset, save_dataset};

pub const LOCK_FILE: &str = ".msrl.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(OutputLock { path, _file: file }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                Err(MsrlError::validation(format!("{} is locked by another run ({} exists)", dir.display(), LOCK_FILE)))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
