//! Per-cell error summaries and result persistence.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{CellRecord, ExperimentResult};
use crate::error::{parse_err, DiceError, Result};
use crate::mdp::policy_value_exact;

/// Lower bound applied to `log10 |error|` so exact estimates stay finite.
pub const LOG_ERROR_FLOOR: f64 = -12.0;

/// Summary of one (estimator, trajectories, horizon) cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: String,
    pub trajectories: usize,
    pub horizon: usize,
    /// Seeds with an estimate.
    pub count: usize,
    pub failed: usize,
    /// `sqrt(mean squared error)`; NaN when every seed failed.
    pub rmse: f64,
    pub log_rmse: f64,
    pub median_abs: f64,
    pub p25_abs: f64,
    pub p75_abs: f64,
    /// Percentiles of the per-seed `log10 |error|` (floored).
    pub median_log: f64,
    pub p25_log: f64,
    pub p75_log: f64,
}

/// `log10 |e|`, floored.
pub fn log_error(abs_error: f64) -> f64 {
    if abs_error > 0.0 {
        abs_error.log10().max(LOG_ERROR_FLOOR)
    } else {
        LOG_ERROR_FLOOR
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Summarizes raw records per cell. Cells appear in order of first
/// occurrence, so the output does not depend on seed order.
pub fn rmse_aggregate(records: &[CellRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, usize, usize)> = Vec::new();
    for r in records {
        let key = (r.estimator.clone(), r.trajectories, r.horizon);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(estimator, trajectories, horizon)| {
            let cell: Vec<&CellRecord> = records
                .iter()
                .filter(|r| r.estimator == estimator && r.trajectories == trajectories && r.horizon == horizon)
                .collect();
            let sq: Vec<f64> = cell.iter().filter_map(|r| r.sq_error).collect();
            let abs: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
            let logs: Vec<f64> = abs.iter().map(|&a| log_error(a)).collect();
            let rmse = if sq.is_empty() {
                f64::NAN
            } else {
                (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
            };
            CellSummary {
                count: sq.len(),
                failed: cell.len() - sq.len(),
                rmse,
                log_rmse: if rmse.is_nan() { f64::NAN } else { log_error(rmse) },
                median_abs: percentile(&abs, 0.5),
                p25_abs: percentile(&abs, 0.25),
                p75_abs: percentile(&abs, 0.75),
                median_log: percentile(&logs, 0.5),
                p25_log: percentile(&logs, 0.25),
                p75_log: percentile(&logs, 0.75),
                estimator,
                trajectories,
                horizon,
            }
        })
        .collect()
}

/// Finds the summary for a cell.
pub fn find_summary<'a>(
    summaries: &'a [CellSummary],
    estimator: &str,
    trajectories: usize,
    horizon: usize,
) -> Option<&'a CellSummary> {
    summaries
        .iter()
        .find(|s| s.estimator == estimator && s.trajectories == trajectories && s.horizon == horizon)
}

pub const SUMMARY_HEADER: &str = "estimator,trajectories,horizon,count,failed,rmse,log_rmse,median_abs,p25_abs,p75_abs,median_log,p25_log,p75_log";

pub fn summary_csv(summaries: &[CellSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.estimator,
            s.trajectories,
            s.horizon,
            s.count,
            s.failed,
            fmt9(s.rmse),
            fmt9(s.log_rmse),
            fmt9(s.median_abs),
            fmt9(s.p25_abs),
            fmt9(s.p75_abs),
            fmt9(s.median_log),
            fmt9(s.p25_log),
            fmt9(s.p75_log)
        )
        .unwrap();
    }
    out
}

/// Nine significant digits in scientific notation.
pub fn fmt9(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.8e}")
    }
}

/// Writes one JSON object per record.
pub fn write_jsonl(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &result.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads records written by [`write_jsonl`]. The ground truth must agree
/// across records.
pub fn read_jsonl(path: &Path, name: &str) -> Result<ExperimentResult> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records: Vec<CellRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CellRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        records.push(rec);
    }
    let truth = records.first().map(|r| r.truth).ok_or(DiceError::EmptyDataset)?;
    if let Some(bad) = records.iter().find(|r| r.truth != truth) {
        return Err(DiceError::Config(format!(
            "ground truth differs across records ({} vs {truth})",
            bad.truth
        )));
    }
    for r in &records {
        let consistent = match (r.estimate, r.sq_error) {
            (Some(v), Some(sq)) => ((v - r.truth).powi(2) - sq).abs() <= 1e-12 * (1.0 + sq),
            (None, None) => true,
            _ => false,
        };
        if !consistent {
            return Err(DiceError::Config(format!(
                "squared error of {} seed {} is inconsistent with its estimate",
                r.estimator, r.seed
            )));
        }
    }
    Ok(ExperimentResult {
        name: name.to_string(),
        truth,
        records,
    })
}

/// Recomputes the ground truth from the config and checks the stored one.
pub fn verify_ground_truth(result: &ExperimentResult, config: &ExperimentConfig) -> Result<f64> {
    let setup = config.setup()?;
    let truth = policy_value_exact(&setup.mdp, &setup.target)?;
    if (truth - result.truth).abs() > 1e-10 {
        return Err(DiceError::Config(format!(
            "stored ground truth {} differs from recomputed {truth}",
            result.truth
        )));
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, err: Option<f64>) -> CellRecord {
        CellRecord {
            estimator: "e".into(),
            seed,
            trajectories: 1,
            horizon: 1,
            estimate: err.map(|e| 1.0 + e),
            truth: 1.0,
            sq_error: err.map(|e| e * e),
            error: None,
            curve: None,
        }
    }

    #[test]
    fn rmse_of_three_and_four() {
        let s = &rmse_aggregate(&[rec(0, Some(3.0)), rec(1, Some(4.0))])[0];
        assert!((s.rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((s.median_abs - 3.5).abs() < 1e-12);
        assert!((s.p25_abs - 3.25).abs() < 1e-12);
    }

    #[test]
    fn single_seed_percentiles() {
        let s = &rmse_aggregate(&[rec(0, Some(0.1))])[0];
        for v in [s.rmse, s.median_abs, s.p25_abs, s.p75_abs] {
            assert!((v - 0.1).abs() < 1e-15);
        }
        assert!((s.median_log + 1.0).abs() < 1e-12);
    }

    #[test]
    fn failed_cells() {
        let s = &rmse_aggregate(&[rec(0, None), rec(1, None)])[0];
        assert!(s.rmse.is_nan() && s.median_log.is_nan());
        assert_eq!((s.count, s.failed), (0, 2));
        let s = &rmse_aggregate(&[rec(0, None), rec(1, Some(2.0))])[0];
        assert_eq!((s.count, s.failed), (1, 1));
        assert_eq!(s.rmse, 2.0);
    }

    #[test]
    fn exact_estimates_hit_the_floor() {
        assert_eq!(log_error(0.0), LOG_ERROR_FLOOR);
        assert_eq!(log_error(1e-20), LOG_ERROR_FLOOR);
        assert!((log_error(0.01) + 2.0).abs() < 1e-15);
    }
}
