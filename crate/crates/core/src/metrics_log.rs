//! Append-only JSONL metrics logs.
//!
//! One record per line, sorted field names, no timestamps or hostnames:
//! a rerun with the same seed must reproduce the file byte for byte.
//! Every record embeds the run-config checksum, so any number in any
//! log can be traced to the exact configuration that produced it.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub stage: String,
    pub event: String,
    pub step: u64,
    pub config_sha256: String,
    pub values: BTreeMap<String, f64>,
}

/// Writer handle for one stage's log file. Opening never truncates;
/// records only ever accumulate.
pub struct MetricsLog {
    path: PathBuf,
    config_sha256: String,
}

impl MetricsLog {
    pub fn open(path: &Path, config_sha256: &str) -> Result<MetricsLog> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(MetricsLog {
            path: path.to_path_buf(),
            config_sha256: config_sha256.to_string(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and flushes it.
    pub fn append(
        &self,
        stage: &str,
        event: &str,
        step: u64,
        values: &BTreeMap<String, f64>,
    ) -> Result<()> {
        let record = MetricsRecord {
            stage: stage.to_string(),
            event: event.to_string(),
            step,
            config_sha256: self.config_sha256.clone(),
            values: values.clone(),
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }
}

/// Convenience for building the sorted value map from literal pairs.
pub fn metric_values<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Reads a log back, one record per non-empty line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::MissingPrerequisite {
        path: path.to_path_buf(),
        hint: format!("metrics log not readable ({e})"),
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}: bad metrics record: {e}", path.display())))?,
        );
    }
    Ok(out)
}
