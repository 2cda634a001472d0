//! Per-step training log: one `step=<n> lr=<x> loss=<x>` line per step.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    /// Floats use the shortest text that parses back to the same value.
    pub fn line(&self) -> String {
        format!("step={} lr={:?} loss={:?}", self.step, self.lr, self.loss)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed metrics line {:?}", line));
        let mut fields = line.split_whitespace();
        let mut take = |key: &str| -> Result<&str> {
            fields.next().and_then(|f| f.strip_prefix(key)).and_then(|f| f.strip_prefix('=')).ok_or_else(bad)
        };
        let step = take("step")?.parse().map_err(|_| bad())?;
        let lr = take("lr")?.parse().map_err(|_| bad())?;
        let loss = take("loss")?.parse().map_err(|_| bad())?;
        if fields.next().is_some() {
            return Err(bad());
        }
        Ok(Self { step, lr, loss })
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<StepRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(StepRecord::parse).collect()
}

/// Appends one flushed line per record.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", r.line())?;
        self.out.flush()?;
        Ok(())
    }
}
