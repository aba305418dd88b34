//! Metrics CSV stream: `round,scope,metric,value` rows under a commented
//! header that embeds the resolved config, so every artifact is
//! self-describing.
//!
//! The file is append-only and flushed once per round; a killed run leaves
//! a parseable prefix. Everything except the `# generated_at:` line is
//! deterministic for a given config.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};

/// Registry of metric names the writer accepts. Keeping the set closed
/// means downstream tooling can match on names without defensive parsing.
pub const METRIC_NAMES: &[&str] = &[
    "loss",
    "accuracy",
    "dice",
    "local_loss",
    "n_k",
    "alpha_s",
    "alpha_top",
    "alpha_w",
    "alpha",
];

/// Row scope: the global model or one client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    Client(usize),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => write!(f, "global"),
            Scope::Client(id) => write!(f, "client:{}", id),
        }
    }
}

impl Scope {
    fn parse(s: &str) -> Result<Scope> {
        if s == "global" {
            return Ok(Scope::Global);
        }
        if let Some(id) = s.strip_prefix("client:") {
            let id = id
                .parse()
                .map_err(|_| Error::Format(format!("bad client scope '{}'", s)))?;
            return Ok(Scope::Client(id));
        }
        Err(Error::Format(format!("bad scope '{}'", s)))
    }
}

/// One metrics observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub scope: Scope,
    pub metric: String,
    pub value: f64,
}

impl MetricsRow {
    pub fn new(round: usize, scope: Scope, metric: &str, value: f64) -> MetricsRow {
        MetricsRow {
            round,
            scope,
            metric: metric.to_string(),
            value,
        }
    }
}

/// Streaming CSV writer. Construction writes the header; each
/// `write_round` call appends its rows and flushes.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_round: usize,
}

impl MetricsWriter {
    /// Create (truncate) the file at `path` and write the header: a format
    /// version line, a timestamp, the resolved config as `# `-prefixed
    /// lines, and the column header.
    pub fn create(path: &Path, resolved_config: &str) -> Result<MetricsWriter> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# fedgraph metrics v1")?;
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(out, "# generated_at: {}", stamp)?;
        writeln!(out, "# config:")?;
        for line in resolved_config.lines() {
            if line.is_empty() {
                writeln!(out, "#")?;
            } else {
                writeln!(out, "#   {}", line)?;
            }
        }
        writeln!(out, "round,scope,metric,value")?;
        out.flush()?;
        Ok(MetricsWriter {
            out,
            last_round: 0,
        })
    }

    /// Append one round's rows and flush. Rows must share a non-decreasing
    /// round number and use registered metric names.
    pub fn write_round(&mut self, rows: &[MetricsRow]) -> Result<()> {
        for row in rows {
            if row.round < self.last_round {
                return Err(Error::Internal(format!(
                    "metrics rounds must be non-decreasing: {} after {}",
                    row.round, self.last_round
                )));
            }
            if !METRIC_NAMES.contains(&row.metric.as_str()) {
                return Err(Error::Internal(format!(
                    "metric '{}' is not in the registry",
                    row.metric
                )));
            }
            if !row.value.is_finite() {
                return Err(Error::Numeric(format!(
                    "metric '{}' at round {} is not finite",
                    row.metric, row.round
                )));
            }
            self.last_round = row.round;
            writeln!(
                self.out,
                "{},{},{},{}",
                row.round, row.scope, row.metric, row.value
            )?;
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics CSV produced by [`MetricsWriter`], skipping comments.
pub fn read_metrics(content: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() || line == "round,scope,metric,value" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "metrics line {} has {} fields, expected 4",
                i + 1,
                fields.len()
            )));
        }
        let round = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad round on line {}", i + 1)))?;
        let value = fields[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad value on line {}", i + 1)))?;
        rows.push(MetricsRow {
            round,
            scope: Scope::parse(fields[1])?,
            metric: fields[2].to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Drop the volatile header lines, leaving only content covered by the
/// determinism contract. Two runs of the same config must agree on this.
pub fn deterministic_view(content: &str) -> String {
    content
        .lines()
        .filter(|line| !line.starts_with("# generated_at:"))
        .collect::<Vec<_>>()
        .join("\n")
}
