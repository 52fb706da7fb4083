use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::EpochStats;

/// Bumped whenever the CSV columns change.
pub const TELEMETRY_SCHEMA_VERSION: u32 = 1;

pub const TELEMETRY_COLUMNS: [&str; 8] = [
    "epoch",
    "loss",
    "confidence",
    "agreement",
    "purity",
    "min_rel_size",
    "max_rel_size",
    "empty_frac",
];

/// One CSV record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub loss: f64,
    pub confidence: f64,
    pub agreement: f64,
    pub purity: f64,
    pub min_rel_size: f64,
    pub max_rel_size: f64,
    pub empty_frac: f64,
}

impl From<&EpochStats> for TelemetryRow {
    fn from(s: &EpochStats) -> Self {
        Self {
            epoch: s.epoch,
            loss: s.loss,
            confidence: s.confidence,
            agreement: s.agreement,
            purity: s.purity,
            min_rel_size: s.min_rel_size,
            max_rel_size: s.max_rel_size,
            empty_frac: s.empty_frac,
        }
    }
}

pub fn write_telemetry<W: Write>(writer: W, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if history.is_empty() {
        w.write_record(TELEMETRY_COLUMNS)?;
    }
    for s in history {
        w.serialize(TelemetryRow::from(s))?;
    }
    w.flush()?;
    Ok(())
}

/// Rewrites the whole telemetry file; called once per epoch.
pub fn write_telemetry_file(path: &Path, history: &[EpochStats]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_telemetry(std::io::BufWriter::new(file), history)
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
