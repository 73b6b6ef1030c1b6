// SPDX-License-Identifier: Apache-2.0

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const CSV_HEADER: [&str; 4] = ["t", "scenario", "metric", "value"];

/// One time-series sample; `t` is simulated time or an episode index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: u64,
    pub scenario: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only metrics for one scenario run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    rows: Vec<MetricsRow>,
}

impl Metrics {
    pub fn push(&mut self, t: u64, scenario: &str, metric: &str, value: f64) {
        self.rows.push(MetricsRow { t, scenario: scenario.into(), metric: metric.into(), value });
    }

    pub fn extend(&mut self, other: Metrics) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn to_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(CSV_HEADER).map_err(HarnessError::io)?;
        for r in &self.rows {
            w.write_record([r.t.to_string(), r.scenario.clone(), r.metric.clone(), r.value.to_string()])
                .map_err(HarnessError::io)?;
        }
        w.flush().map_err(HarnessError::io)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let file = std::fs::File::create(path).map_err(HarnessError::io)?;
        self.to_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv(path: &Path) -> Result<Metrics, HarnessError> {
        let mut r = csv::Reader::from_path(path).map_err(HarnessError::io)?;
        let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>().map_err(HarnessError::io)?;
        Ok(Metrics { rows })
    }
}
