//! Metrics and report emission: JSON-lines event logs, CSV tables, JSON
//! reports and plain-text PGM (`P2`) images.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Bumped whenever a field of [`MetricsRecord`] or [`Report`] changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

/// `git describe` of the source tree plus the crate version.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("COMPOSER_LAB_GIT"))
}

fn unix_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub run_id: String,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub metric: String,
    pub value: f64,
    /// Seconds since the Unix epoch.
    pub wall_clock: f64,
}

/// Append-only JSON-lines sink.
pub struct MetricsLog {
    run_id: String,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(path: &Path, run_id: impl Into<String>) -> Result<Self, CliError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        Ok(MetricsLog {
            run_id: run_id.into(),
            out: BufWriter::new(file),
        })
    }

    pub fn record(&mut self, phase: &str, epoch: Option<usize>, step: Option<usize>, metric: &str, value: f64) -> Result<(), CliError> {
        let rec = MetricsRecord {
            schema: SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            phase: phase.into(),
            epoch,
            step,
            metric: metric.into(),
            value,
            wall_clock: unix_secs(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| CliError::Runtime(format!("metrics log: {e}")))
    }
}

/// Envelope for every JSON report: provenance first, then the payload.
#[derive(Debug, Serialize)]
pub struct Report<'a, P: Serialize> {
    pub schema: u32,
    pub command: &'a str,
    pub build: String,
    pub config: &'a RunConfig,
    pub result: P,
}

pub fn write_report<P: Serialize>(path: &Path, command: &str, config: &RunConfig, result: P) -> Result<(), CliError> {
    let report = Report {
        schema: SCHEMA_VERSION,
        command,
        build: build_id(),
        config,
        result,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes `rows` as CSV with a header taken from the row type. A comment-free
/// companion `<name>.meta.json` carries the config and build id, so the CSV
/// stays directly loadable.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R], command: &str, config: &RunConfig) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    write_report(&meta_path(path), command, config, serde_json::json!({ "table": path.file_name().map(|n| n.to_string_lossy().into_owned()) }))
}

pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Plain-text graymap of one `side × side` image with values in [−1, 1],
/// mapped linearly to 0–255 and clamped.
pub fn pgm_text(pixels: &[f32], side: usize) -> String {
    let mut s = format!("P2\n{side} {side}\n255\n");
    for row in pixels.chunks(side) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round();
                (g as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_pgm(path: &Path, pixels: &[f32], side: usize) -> Result<(), CliError> {
    std::fs::write(path, pgm_text(pixels, side)).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_maps_range_endpoints() {
        let text = pgm_text(&[-1.0, 1.0, 0.0, 5.0], 2);
        assert_eq!(text, "P2\n2 2\n255\n0 255\n128 255\n");
    }
}
