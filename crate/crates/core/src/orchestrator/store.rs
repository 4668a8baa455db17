//! On-disk layout of pretrained states and runs.
//!
//! ```text
//! <root>/pretrained/<fingerprint>/{generator,policy,extractor}.state, *.json
//! <root>/runs/<run-id>/config.json
//! <root>/runs/<run-id>/epoch-<i>/{episode.json,state.json,backends/<name>.state}
//! <root>/runs/<run-id>/best/{<name>.state,best.json}
//! <root>/runs/<run-id>/report.csv
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::RunConfig;
use super::pipeline::{Backends, EXTRACTOR, GENERATOR, POLICY};
use crate::error::{Error, Result};

/// Environment variable overriding the checkpoint root.
pub const CHECKPOINT_ROOT_ENV: &str = "EVAUG_CHECKPOINT_ROOT";
pub const DEFAULT_CHECKPOINT_ROOT: &str = "checkpoints";

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingState(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn read_state(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingState(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn state_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.state"))
}

pub fn save_backends(dir: &Path, backends: &Backends) -> Result<()> {
    write_atomic(&state_file(dir, GENERATOR), &backends.generator.save_state()?)?;
    write_atomic(&state_file(dir, EXTRACTOR), &backends.extractor.save_state()?)?;
    write_atomic(&state_file(dir, POLICY), &backends.policy.save_state()?)
}

/// Load all three states, checking each exists before touching any backend.
pub fn load_backends(dir: &Path, backends: &mut Backends) -> Result<()> {
    let g = read_state(&state_file(dir, GENERATOR))?;
    let e = read_state(&state_file(dir, EXTRACTOR))?;
    let p = read_state(&state_file(dir, POLICY))?;
    backends.generator.load_state(&g)?;
    backends.extractor.load_state(&e)?;
    backends.policy.load_state(&p)?;
    Ok(())
}

pub fn load_one(dir: &Path, name: &str) -> Result<Vec<u8>> {
    read_state(&state_file(dir, name))
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    /// Root from the environment, else `./checkpoints`.
    pub fn from_env() -> Self {
        RunStore::new(std::env::var_os(CHECKPOINT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_CHECKPOINT_ROOT), PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Pretrained states do not depend on the retraining length or time cap.
    pub fn pretrained_dir(&self, config: &RunConfig) -> PathBuf {
        let mut key = config.clone();
        key.epochs = 1;
        key.max_wall_clock_secs = None;
        self.root.join("pretrained").join(key.fingerprint())
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        let valid = !run_id.is_empty()
            && run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !run_id.starts_with('.');
        if !valid {
            return Err(Error::InvalidInput(format!("run id `{run_id}` may only use letters, digits, `-`, `_`, `.`")));
        }
        Ok(self.runs_dir().join(run_id))
    }

    /// `run-<fingerprint prefix>-<n>` with the first free `n`.
    pub fn fresh_run_id(&self, config: &RunConfig) -> String {
        self.fresh_run_id_avoiding(config, |_| false)
    }

    /// Like [`RunStore::fresh_run_id`], also skipping ids `reserved` claims
    /// (runs that have started but not yet created their directory).
    pub fn fresh_run_id_avoiding(&self, config: &RunConfig, reserved: impl Fn(&str) -> bool) -> String {
        let fp = config.fingerprint();
        (1..)
            .map(|n| format!("run-{}-{n:03}", &fp[..8]))
            .find(|id| !reserved(id) && !self.runs_dir().join(id).exists())
            .expect("unbounded range")
    }
}

pub fn epoch_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch-{epoch}"))
}
