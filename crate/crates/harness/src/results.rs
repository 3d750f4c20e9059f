//! Result rows, their CSV form and the RMSE / coverage summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One estimate of one method in one repeat. Column order is the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub functional: String,
    pub sweep_value: f64,
    pub repeat: usize,
    pub theta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub truth: f64,
    pub covered: u8,
    pub wall_time_s: f64,
    /// Empty unless the repeat failed; numeric fields are then NaN.
    pub error: String,
}

impl ResultRow {
    #[allow(clippy::too_many_arguments)]
    pub fn estimate(
        method: &str,
        functional: &str,
        sweep_value: f64,
        repeat: usize,
        theta_hat: f64,
        se: f64,
        ci: (f64, f64),
        truth: f64,
        wall_time_s: f64,
    ) -> Self {
        Self {
            method: method.to_string(),
            functional: functional.to_string(),
            sweep_value,
            repeat,
            theta_hat,
            se,
            ci_low: ci.0,
            ci_high: ci.1,
            truth,
            covered: u8::from(ci.0 <= truth && truth <= ci.1),
            wall_time_s,
            error: String::new(),
        }
    }

    pub fn failure(method: &str, functional: &str, sweep_value: f64, repeat: usize, message: &str) -> Self {
        Self {
            method: method.to_string(),
            functional: functional.to_string(),
            sweep_value,
            repeat,
            theta_hat: f64::NAN,
            se: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            truth: f64::NAN,
            covered: 0,
            wall_time_s: 0.0,
            error: message.replace(['\n', '\r'], " "),
        }
    }

    pub fn is_error(&self) -> bool {
        !self.error.is_empty()
    }
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "method",
            "functional",
            "sweep_value",
            "repeat",
            "theta_hat",
            "se",
            "ci_low",
            "ci_high",
            "truth",
            "covered",
            "wall_time_s",
            "error",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Write through a temporary sibling file and rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path, &rows_to_csv(rows)?)
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    rows_from_csv(&std::fs::read_to_string(path)?)
}

/// `sqrt(mean (θ̂ − θ)²)` with a delta-method standard error from the sample
/// variance of the squared errors. `None` marks a cell without usable rows;
/// the standard error needs at least two.
pub fn aggregate_rmse(rows: &[&ResultRow], truth: f64) -> Option<(f64, Option<f64>)> {
    let sq: Vec<f64> = rows
        .iter()
        .filter(|r| !r.is_error() && r.theta_hat.is_finite())
        .map(|r| (r.theta_hat - truth).powi(2))
        .collect();
    let n = sq.len();
    if n == 0 {
        return None;
    }
    let mse = sq.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mse.sqrt(), None));
    }
    let var = sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (n - 1) as f64;
    let rmse = mse.sqrt();
    let se = if rmse > 0.0 {
        (var / n as f64).sqrt() / (2.0 * rmse)
    } else {
        0.0
    };
    Some((rmse, Some(se)))
}

/// Fraction of rows whose interval covers the truth (error rows excluded).
pub fn aggregate_coverage(rows: &[&ResultRow]) -> Option<f64> {
    let ok: Vec<_> = rows.iter().filter(|r| !r.is_error()).collect();
    if ok.is_empty() {
        return None;
    }
    Some(ok.iter().map(|r| f64::from(r.covered)).sum::<f64>() / ok.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: String,
    pub functional: String,
    pub sweep_value: f64,
    pub n: usize,
    pub failures: usize,
    pub rmse: Option<f64>,
    pub rmse_se: Option<f64>,
    pub bias: Option<f64>,
    pub coverage: Option<f64>,
}

/// Per (method, functional, sweep value) summaries in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut order = Vec::new();
    let mut cells: BTreeMap<usize, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.as_str(), r.functional.as_str(), r.sweep_value.to_bits());
        let pos = match order.iter().position(|k| *k == key) {
            Some(p) => p,
            None => {
                order.push(key);
                order.len() - 1
            }
        };
        cells.entry(pos).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|(pos, cell)| {
            let (method, functional, bits) = order[pos];
            let ok: Vec<&ResultRow> = cell.iter().copied().filter(|r| !r.is_error()).collect();
            let truth = ok.first().map(|r| r.truth);
            let rmse = truth.and_then(|t| aggregate_rmse(&ok, t));
            let bias = truth
                .filter(|_| !ok.is_empty())
                .map(|t| ok.iter().map(|r| r.theta_hat - t).sum::<f64>() / ok.len() as f64);
            CellSummary {
                method: method.to_string(),
                functional: functional.to_string(),
                sweep_value: f64::from_bits(bits),
                n: ok.len(),
                failures: cell.len() - ok.len(),
                rmse: rmse.map(|r| r.0),
                rmse_se: rmse.and_then(|r| r.1),
                bias,
                coverage: aggregate_coverage(&ok),
            }
        })
        .collect()
}

/// Plain-text table of summaries, errors scaled by 100.
pub fn format_summary(cells: &[CellSummary]) -> String {
    let fmt = |v: Option<f64>, scale: f64| v.map_or("missing".to_string(), |x| format!("{:.3}", x * scale));
    let mut out = format!(
        "{:<16} {:<14} {:>8} {:>4} {:>10} {:>8} {:>9} {:>8}\n",
        "method", "functional", "sweep", "n", "rmse*100", "se*100", "bias*100", "coverage"
    );
    for c in cells {
        out.push_str(&format!(
            "{:<16} {:<14} {:>8.4} {:>4} {:>10} {:>8} {:>9} {:>8}\n",
            c.method,
            c.functional,
            c.sweep_value,
            c.n,
            fmt(c.rmse, 100.0),
            fmt(c.rmse_se, 100.0),
            fmt(c.bias, 100.0),
            fmt(c.coverage, 1.0),
        ));
    }
    out
}
