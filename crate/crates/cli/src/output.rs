use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn delimiter(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }
}

/// Delimiter-separated table with a header row.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        let d = format.delimiter().to_string();
        let mut s = self.header.join(&d);
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(&d));
            s.push('\n');
        }
        s
    }
}

/// Cell text for a number; `Display` on floats is shortest round-trip.
pub fn cell(v: impl Display) -> String {
    v.to_string()
}

/// Provenance written beside every output. Contains no wall-clock fields,
/// so a re-run with the same arguments rewrites it byte for byte.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub seed: Option<u64>,
    pub params: BTreeMap<&'static str, Value>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: &'static str,
}

impl RunManifest {
    pub fn new(subcommand: &'static str, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand,
            seed,
            params: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn param(&mut self, key: &'static str, value: impl Serialize) -> &mut Self {
        self.params
            .insert(key, serde_json::to_value(value).expect("parameters serialize"));
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_file(path, text.as_bytes())
    }
}

/// `<file>.manifest.json` next to a single-file output.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
