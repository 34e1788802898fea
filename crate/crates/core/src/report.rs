//! Report envelopes, CSV tables and on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::snapshot::{self, Snapshot};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
    Bool(bool),
    /// An infinite rate or a missing value; written as `inf`.
    Infinite,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Infinite, Cell::Float)
    }
}

/// 17 significant digits, so every value parses back bit for bit.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => format_float(*v),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => {
                if s.contains([',', '"', '\n']) {
                    format!("\"{}\"", s.replace('"', "\"\""))
                } else {
                    s.clone()
                }
            }
            Cell::Bool(b) => b.to_string(),
            Cell::Infinite => "inf".into(),
        }
    }
}

/// Where the numbers in a table came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    /// Ensemble size, trajectory count or replica count.
    pub samples: usize,
    pub dt: f64,
    pub n: u32,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub provenance: Provenance,
}

impl Table {
    pub fn new(name: &str, header: &[&str], provenance: Provenance) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            provenance,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header of {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Cell::render).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }
}

/// What an experiment hands back to the harness.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub payload: Value,
    pub tables: Vec<Table>,
    pub snapshots: Vec<(String, Snapshot)>,
    /// Diagnostics that completed but did not come out as expected.
    pub flags: Vec<String>,
}

impl ExperimentOutput {
    pub fn exit_code(&self) -> i32 {
        if self.flags.is_empty() { 0 } else { 2 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TableProvenance {
    pub table: String,
    pub file: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportEnvelope {
    pub experiment: String,
    pub config_hash: String,
    pub code_version: String,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub started_unix: u64,
    pub payload: Value,
    pub provenance: Vec<TableProvenance>,
    pub flags: Vec<String>,
}

/// Paths written by [`write_artifacts`].
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub envelope: PathBuf,
    pub config: PathBuf,
    pub tables: Vec<PathBuf>,
    pub snapshots: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `config.txt`, one CSV per table, snapshots and the envelope
/// `<experiment>.json` under `dir`. The file stem of every artifact is
/// prefixed with the experiment name.
pub fn write_artifacts(
    dir: &Path,
    experiment: &str,
    config: &RunConfig,
    output: &ExperimentOutput,
    wall_clock_seconds: f64,
    started_unix: u64,
    threads: usize,
) -> Result<Artifacts> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = experiment.replace(' ', "-");
    let config_path = dir.join(format!("{stem}.config.txt"));
    let text = config.serialize();
    write_file(&config_path, text.as_bytes())?;
    let mut tables = Vec::new();
    let mut provenance = Vec::new();
    for t in &output.tables {
        let file = format!("{stem}.{}.csv", t.name);
        let path = dir.join(&file);
        write_file(&path, t.to_csv().as_bytes())?;
        tables.push(path);
        provenance.push(TableProvenance {
            table: t.name.clone(),
            file,
            provenance: t.provenance.clone(),
        });
    }
    let mut snaps = Vec::new();
    for (name, s) in &output.snapshots {
        let path = dir.join(format!("{stem}.{name}.snap"));
        snapshot::write(&path, s)?;
        snaps.push(path);
    }
    let env = ReportEnvelope {
        experiment: experiment.to_string(),
        config_hash: config.hash(),
        code_version: CODE_VERSION.to_string(),
        threads,
        wall_clock_seconds,
        started_unix,
        payload: output.payload.clone(),
        provenance,
        flags: output.flags.clone(),
    };
    let envelope = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&env).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&envelope, json.as_bytes())?;
    Ok(Artifacts {
        envelope,
        config: config_path,
        tables,
        snapshots: snaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prov() -> Provenance {
        Provenance {
            seed: 1,
            samples: 2,
            dt: 0.5,
            n: 3,
            notes: String::new(),
        }
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new("t", &["a", "b", "c"], prov());
        t.push(vec![0.1.into(), Cell::Infinite, "x,y".into()]);
        assert_eq!(t.to_csv(), "a,b,c\n1.0000000000000001e-1,inf,\"x,y\"\n");
    }

    proptest! {
        #[test]
        fn floats_round_trip(v in any::<f64>()) {
            prop_assume!(v.is_finite());
            let back: f64 = format_float(v).parse().unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn envelope_hash_matches_written_config() {
        let dir = std::env::temp_dir().join(format!("nsldp-report-{}", std::process::id()));
        let cfg = RunConfig::default();
        let out = ExperimentOutput {
            payload: serde_json::json!({"x": 1}),
            ..Default::default()
        };
        let a = write_artifacts(&dir, "demo", &cfg, &out, 0.0, 0, 1).unwrap();
        let text = fs::read_to_string(&a.config).unwrap();
        let back = crate::config::parse_config(&text).unwrap();
        let env: Value = serde_json::from_str(&fs::read_to_string(&a.envelope).unwrap()).unwrap();
        assert_eq!(env["config_hash"], back.hash());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unwritable_directory_names_the_path() {
        let cfg = RunConfig::default();
        let err = write_artifacts(Path::new("/proc/nsldp/none"), "x", &cfg, &ExperimentOutput::default(), 0.0, 0, 1).unwrap_err();
        assert!(err.to_string().contains("/proc/nsldp/none"), "{err}");
    }
}
