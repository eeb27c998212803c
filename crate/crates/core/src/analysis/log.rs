use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::cost::csv_err;
use crate::error::{io_err, Error, Result};

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: u32,
    pub method: String,
    pub loss: f64,
    /// Empty when the round was not evaluated.
    pub metric_name: String,
    pub metric_value: Option<f64>,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub wall_ms: u64,
}

/// Append-only per-round log with strictly increasing rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.round <= last.round {
                return Err(Error::Metric(format!(
                    "round {} logged after round {}",
                    record.round, last.round
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `(round, value)` for every evaluated round.
    pub fn metric_curve(&self) -> Vec<(u32, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.metric_value.map(|v| (r.round, v)))
            .collect()
    }

    pub fn last_metric(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.metric_value)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        if self.records.is_empty() {
            w.write_record([
                "round",
                "method",
                "loss",
                "metric_name",
                "metric_value",
                "up_bytes",
                "down_bytes",
                "wall_ms",
            ])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(f).map_err(|e| csv_err(path, e))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<MetricLog> {
        let mut log = MetricLog::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            let rec: MetricRecord = rec.map_err(|e| Error::Metric(format!("bad metrics row: {e}")))?;
            log.push(rec)?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<MetricLog> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_csv(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: u32, v: Option<f64>) -> MetricRecord {
        MetricRecord {
            round,
            method: "mpsl".into(),
            loss: 0.25 + f64::from(round),
            metric_name: if v.is_some() { "accuracy".into() } else { String::new() },
            metric_value: v,
            up_bytes: 10,
            down_bytes: 20,
            wall_ms: 0,
        }
    }

    #[test]
    fn rounds_must_increase() {
        let mut log = MetricLog::new();
        log.push(rec(1, None)).unwrap();
        assert!(log.push(rec(1, None)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut log = MetricLog::new();
        log.push(rec(1, None)).unwrap();
        log.push(rec(2, Some(0.1 + 0.2))).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("round,method,loss,metric_name,metric_value,up_bytes,down_bytes,wall_ms\n"));
        assert_eq!(MetricLog::read_csv(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn empty_log_still_has_header() {
        let mut buf = Vec::new();
        MetricLog::new().write_csv(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        assert!(MetricLog::read_csv(buf.as_slice()).unwrap().is_empty());
    }
}
