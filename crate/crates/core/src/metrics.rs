//! Per-epoch metrics CSV.

use std::fs::{File, OpenOptions};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::MetricsRecord;

pub const METRICS_HEADER: &str =
    "epoch,train_loss,accuracy,mean_entropy,beta1,beta2,base,wall_time_s";

/// Appends one row per epoch, flushing after each so an interrupted run
/// keeps its completed epochs.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Create (or truncate) `path` and write the header.
    pub fn create(path: &Path) -> Result<Self> {
        let file =
            File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(MetricsWriter {
            inner: csv::WriterBuilder::new()
                .has_headers(true)
                .from_writer(file),
        })
    }

    /// Open an existing metrics file for appending further rows.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(MetricsWriter {
            inner: csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.inner
            .flush()
            .map_err(|e| Error::io("flushing metrics", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingArtifact(path.to_path_buf())
        }
        _ => Error::from(e),
    })?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::DataIntegrity(format!(
            "{} has header {:?}, expected {METRICS_HEADER:?}",
            path.display(),
            header.join(",")
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rec = MetricsRecord {
            epoch: 1,
            train_loss: 0.123456789012345,
            accuracy: 87.5,
            mean_entropy: 0.3,
            beta1: 1.0,
            beta2: 0.1,
            base: std::f64::consts::E,
            wall_time_s: 0.5,
        };
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&rec).unwrap();
        drop(w);
        let mut w = MetricsWriter::append(&path).unwrap();
        w.write(&MetricsRecord {
            epoch: 2,
            ..rec.clone()
        })
        .unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], rec);
        assert_eq!(back[1].epoch, 2);
    }
}
