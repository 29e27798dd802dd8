//! Line-delimited JSON training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::Result;

/// Keeps every record in memory and optionally mirrors it to a file, one
/// JSON object per line.
#[derive(Default)]
pub struct RunLog {
    records: Vec<Value>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        if let Some(dir) = path.as_ref().parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn record(&mut self, value: Value) -> Result<()> {
        log::debug!("{value}");
        if let Some(sink) = self.sink.as_mut() {
            serde_json::to_writer(&mut *sink, &value)?;
            sink.write_all(b"\n")?;
            sink.flush()?;
        }
        self.records.push(value);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    /// Values of `field` over records whose `stage` equals `stage`.
    pub fn series(&self, stage: &str, field: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r["stage"] == stage)
            .filter_map(|r| r[field].as_f64())
            .collect()
    }
}
