use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::Result;

/// Append-only JSON-lines sink. A sink without a file keeps records in memory only.
#[derive(Debug, Default)]
pub struct MetricsLog {
    file: Option<BufWriter<File>>,
    records: Vec<Value>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Some(BufWriter::new(f)), records: Vec::new() })
    }

    pub fn record(&mut self, value: Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &value)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        log::debug!("{value}");
        self.records.push(value);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Value>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        {
            let mut log = MetricsLog::append(&path).unwrap();
            log.record(json!({"step": 1, "loss": 0.5})).unwrap();
            log.record(json!({"step": 2, "loss": 0.25})).unwrap();
        }
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1]["loss"], 0.25);
    }
}
