use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 12] = [
    "global_step",
    "env",
    "method",
    "first_task_acc",
    "all_seen_acc",
    "env_acc",
    "lambda_hat",
    "kl_hat",
    "bound_rhs",
    "bound_lhs",
    "loss_inference",
    "loss_solver",
];

pub const BOUND_HEADER: [&str; 11] = [
    "global_step",
    "boundary",
    "env",
    "support_error",
    "lambda_hat",
    "kl_raw",
    "kl_hat",
    "query_error",
    "c_star",
    "bound_rhs",
    "bound_lhs",
];

/// One evaluation point. Boundary-only quantities are `None` elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub global_step: u64,
    pub env: usize,
    pub method: String,
    pub first_task_acc: f64,
    pub all_seen_acc: f64,
    pub env_acc: f64,
    pub lambda_hat: Option<f64>,
    pub kl_hat: Option<f64>,
    pub bound_rhs: Option<f64>,
    pub bound_lhs: Option<f64>,
    pub loss_inference: f64,
    pub loss_solver: f64,
    /// Written at the end of an environment. Not a CSV column.
    #[serde(default)]
    pub boundary: bool,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.global_step.to_string(),
            self.env.to_string(),
            self.method.clone(),
            self.first_task_acc.to_string(),
            self.all_seen_acc.to_string(),
            self.env_acc.to_string(),
            cell(self.lambda_hat),
            cell(self.kl_hat),
            cell(self.bound_rhs),
            cell(self.bound_lhs),
            self.loss_inference.to_string(),
            self.loss_solver.to_string(),
        ]
    }

    pub fn is_boundary(&self) -> bool {
        self.boundary
    }
}

/// Append-only evaluation log with a nondecreasing global step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.global_step < last.global_step {
                return Err(Error::Invalid(format!(
                    "metrics step {} precedes logged step {}",
                    row.global_step, last.global_step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Rows written at environment boundaries.
    pub fn boundaries(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.is_boundary())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Invalid(format!("metrics csv: {e}"));
        w.write_record(METRICS_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record(r.record()).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub global_step: u64,
    /// Number of environments seen when the bound was assembled.
    pub boundary: usize,
    pub env: usize,
    pub support_error: f64,
    pub lambda_hat: f64,
    pub kl_raw: Option<f64>,
    pub kl_hat: f64,
    pub query_error: f64,
    pub c_star: f64,
    pub bound_rhs: f64,
    pub bound_lhs: f64,
}

/// Per-environment bound components for every boundary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundLog {
    pub rows: Vec<BoundRow>,
}

impl BoundLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Invalid(format!("bound csv: {e}"));
        w.write_record(BOUND_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.global_step.to_string(),
                r.boundary.to_string(),
                r.env.to_string(),
                r.support_error.to_string(),
                r.lambda_hat.to_string(),
                cell(r.kl_raw),
                r.kl_hat.to_string(),
                r.query_error.to_string(),
                r.c_star.to_string(),
                r.bound_rhs.to_string(),
                r.bound_lhs.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            global_step: step,
            env: 0,
            method: "gfr".into(),
            first_task_acc: 0.5,
            all_seen_acc: 0.5,
            env_acc: 0.5,
            lambda_hat: None,
            kl_hat: None,
            bound_rhs: None,
            bound_lhs: None,
            loss_inference: 1.25,
            loss_solver: 0.1,
            boundary: false,
        }
    }

    #[test]
    fn header_and_empty_cells() {
        let mut log = MetricsLog::new();
        log.push(row(3)).unwrap();
        let s = log.to_csv_string().unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "3,0,gfr,0.5,0.5,0.5,,,,,1.25,0.1");
    }

    #[test]
    fn steps_cannot_go_back() {
        let mut log = MetricsLog::new();
        log.push(row(5)).unwrap();
        log.push(row(5)).unwrap();
        assert!(log.push(row(4)).is_err());
        assert_eq!(log.rows().len(), 2);
    }
}
