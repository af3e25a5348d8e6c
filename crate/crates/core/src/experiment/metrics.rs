//! Per-round metrics rows and the CSV writer.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row per (round, scheme). Byte columns come from the transport's
/// frame length fields; plaintext schemes report 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub scheme: String,
    pub attack: String,
    pub byz_frac: f64,
    /// Test accuracy in [0, 1] after this round's update.
    pub accuracy: f64,
    pub loss: f64,
    pub online_round_ms: f64,
    pub offline_ms: f64,
    pub bytes_c2s: u64,
    pub bytes_s0s1: u64,
    pub bytes_s1s0: u64,
    pub bytes_s2c: u64,
    pub saturation_count: usize,
    pub no_trust_flag: u8,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 14] = [
        "round",
        "scheme",
        "attack",
        "byz_frac",
        "accuracy",
        "loss",
        "online_round_ms",
        "offline_ms",
        "bytes_c2s",
        "bytes_s0s1",
        "bytes_s1s0",
        "bytes_s2c",
        "saturation_count",
        "no_trust_flag",
    ];
}

/// Writes the header immediately and flushes after every row, so a failed
/// run leaves the completed rounds on disk.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record(MetricsRow::HEADER)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}
