use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

/// JSON-lines metrics with strictly increasing steps and finite values.
#[derive(Default)]
pub struct MetricsLog {
    file: Option<BufWriter<File>>,
    pub records: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, so a resumed run continues the same file.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(BufWriter::new(f)),
            records: Vec::new(),
        })
    }

    pub fn log(&mut self, step: u64, values: BTreeMap<String, f64>) -> Result<()> {
        if let Some((name, value)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                name: name.clone(),
                step,
                value: *value,
            });
        }
        if let Some(last) = self.records.last() {
            if step <= last.step {
                return Err(Error::InvalidState(format!("metrics step {step} after {}", last.step)));
            }
        }
        let rec = StepMetrics { step, values };
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| Error::io("metrics", e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    /// Values of `name` in step order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.values.get(name).copied()).collect()
    }
}
