//! Artifact writers. Every file opens with the engine version and config
//! hash, and no file carries a timestamp.

use std::fs;
use std::path::{Path, PathBuf};

use negdiff_core::ENGINE_VERSION;
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub engine: &'static str,
    pub config_sha256: String,
}

impl Meta {
    pub fn new(hash: &str) -> Self {
        Self { engine: ENGINE_VERSION, config_sha256: hash.to_string() }
    }

    /// Comment line opening every CSV file.
    pub fn csv_line(&self) -> String {
        format!("# {} config_sha256={}\n", self.engine, self.config_sha256)
    }
}

/// Builds a CSV document in memory so each file is written exactly once.
pub struct Csv {
    writer: csv::Writer<Vec<u8>>,
}

impl Csv {
    pub fn new(meta: &Meta, header: &[String]) -> CliResult<Self> {
        let mut writer = csv::Writer::from_writer(meta.csv_line().into_bytes());
        writer.write_record(header).map_err(csv_error)?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> CliResult<()> {
        self.writer.write_record(fields).map_err(csv_error)
    }

    pub fn into_bytes(self) -> CliResult<Vec<u8>> {
        self.writer.into_inner().map_err(|e| CliError::Mismatch(format!("csv buffer: {e}")))
    }
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Mismatch(format!("csv encoding: {e}"))
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// A JSON document whose first key is the metadata.
pub fn json_document<T: Serialize>(meta: &Meta, body: &T) -> CliResult<Vec<u8>> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        meta: &'a Meta,
        #[serde(flatten)]
        body: &'a T,
    }
    let mut bytes = serde_json::to_vec_pretty(&Doc { meta, body })
        .map_err(|e| CliError::Mismatch(format!("json encoding: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
