//! Experiment pipelines over `torus-core`: configuration, runs and reports.
//!
//! Every command returns an [`Outcome`]; [`Outcome::write`] turns it into a
//! JSON report (with the resolved configuration embedded) and CSV tables.
//! Outputs contain no wall-clock data, so equal inputs give equal bytes.

pub mod cert;
pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};
use torus_core::approx::ApproxError;
use torus_core::diophantine::DiophantineError;
use torus_core::gevrey::GevreyError;
use torus_core::kam::KamError;
use torus_core::model::ModelError;
use torus_core::normal_form::NormalFormError;
use torus_core::whitney::WhitneyError;

pub use config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForgeError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ForgeError {
    /// 1 for bad input, 3 for numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            ForgeError::Config(_) | ForgeError::Io(_) => 1,
            ForgeError::Numerical(_) => 3,
        }
    }
}

impl From<KamError> for ForgeError {
    fn from(e: KamError) -> Self {
        match e {
            KamError::InvalidParameter(_) => ForgeError::Config(e.to_string()),
            _ => ForgeError::Numerical(e.to_string()),
        }
    }
}

impl From<DiophantineError> for ForgeError {
    fn from(e: DiophantineError) -> Self {
        match e {
            DiophantineError::EmptyWindow => ForgeError::Numerical(e.to_string()),
            _ => ForgeError::Config(e.to_string()),
        }
    }
}

impl From<NormalFormError> for ForgeError {
    fn from(e: NormalFormError) -> Self {
        match e {
            NormalFormError::InvalidInput(_) => ForgeError::Config(e.to_string()),
            _ => ForgeError::Numerical(e.to_string()),
        }
    }
}

impl From<ApproxError> for ForgeError {
    fn from(e: ApproxError) -> Self {
        match e {
            ApproxError::InvalidSpec(_) => ForgeError::Config(e.to_string()),
            _ => ForgeError::Numerical(e.to_string()),
        }
    }
}

macro_rules! numerical_from {
    ($($t:ty),*) => {
        $(impl From<$t> for ForgeError {
            fn from(e: $t) -> Self {
                ForgeError::Numerical(e.to_string())
            }
        })*
    };
}

numerical_from!(GevreyError, ModelError, WhitneyError);

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.to_string(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, ForgeError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| ForgeError::Io(e.to_string());
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| ForgeError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| ForgeError::Io(e.to_string()))
    }
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Result of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub command: String,
    pub summary: Value,
    pub tables: Vec<Table>,
    /// Named validity flags; the exit code is 2 if any is false.
    pub flags: BTreeMap<String, bool>,
}

impl Outcome {
    pub fn new(command: &str) -> Self {
        Outcome { command: command.to_string(), summary: json!({}), tables: Vec::new(), flags: BTreeMap::new() }
    }

    pub fn flag(&mut self, name: &str, ok: bool) {
        self.flags.insert(name.to_string(), ok);
    }

    pub fn ok(&self) -> bool {
        self.flags.values().all(|v| *v)
    }

    pub fn exit_code(&self) -> i32 {
        if self.ok() {
            0
        } else {
            2
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn report(&self, cfg: &ExperimentConfig) -> Result<Value, ForgeError> {
        let config = serde_json::to_value(cfg).map_err(|e| ForgeError::Io(e.to_string()))?;
        Ok(json!({
            "command": self.command,
            "config": config,
            "summary": self.summary,
            "flags": self.flags,
            "ok": self.ok(),
            "tables": self.tables.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
        }))
    }

    pub fn report_json(&self, cfg: &ExperimentConfig) -> Result<String, ForgeError> {
        let mut s = serde_json::to_string_pretty(&self.report(cfg)?).map_err(|e| ForgeError::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `<command>.json` and one `<command>-<table>.csv` per table.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<std::path::PathBuf>, ForgeError> {
        let io = |e: std::io::Error| ForgeError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut written = Vec::new();
        let jp = dir.join(format!("{}.json", self.command));
        std::fs::write(&jp, self.report_json(cfg)?).map_err(io)?;
        written.push(jp);
        for t in &self.tables {
            let p = dir.join(format!("{}-{}.csv", self.command, t.name));
            std::fs::write(&p, t.to_csv()?).map_err(io)?;
            written.push(p);
        }
        Ok(written)
    }
}
