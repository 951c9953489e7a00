//! Per-run and aggregate CSV files.
//!
//! Run files have the columns of [`RUN_HEADER`]. `uploads_mask` lists one `0`/`1` character
//! per learner, learner 1 first. Floats are written in shortest round-trip form, so equal
//! values always give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lapg::StepRecord;

pub const RUN_HEADER: &str =
    "run_id,iteration,cumulative_uploads,cumulative_broadcasts,avg_reward,grad_norm,lyapunov,uploads_mask";

pub const AGGREGATE_HEADER: &str = "iteration,runs,cumulative_uploads_mean,cumulative_uploads_half_std,\
cumulative_broadcasts_mean,avg_reward_mean,avg_reward_half_std,grad_norm_mean,lyapunov_mean";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: usize,
    pub iteration: usize,
    pub cumulative_uploads: u64,
    pub cumulative_broadcasts: u64,
    pub avg_reward: f64,
    pub grad_norm: f64,
    pub lyapunov: Option<f64>,
    pub uploads_mask: String,
}

impl MetricsRow {
    pub fn from_record(run_id: usize, learners: usize, r: &StepRecord) -> Self {
        let mut mask = vec![b'0'; learners];
        for id in &r.uploads {
            mask[id - 1] = b'1';
        }
        MetricsRow {
            run_id,
            iteration: r.iteration,
            cumulative_uploads: r.comm.uploads,
            cumulative_broadcasts: r.comm.broadcasts,
            avg_reward: -r.objective_estimate / learners as f64,
            grad_norm: r.grad_norm,
            lyapunov: r.lyapunov,
            uploads_mask: String::from_utf8(mask).expect("ascii"),
        }
    }

    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.run_id,
            self.iteration,
            self.cumulative_uploads,
            self.cumulative_broadcasts,
            self.avg_reward,
            self.grad_norm,
            self.lyapunov.map(|v| v.to_string()).unwrap_or_default(),
            self.uploads_mask
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::config(format!("metrics row has {} fields: {line}", f.len())));
        }
        let bad = |what: &str| Error::config(format!("bad {what} in metrics row: {line}"));
        Ok(MetricsRow {
            run_id: f[0].parse().map_err(|_| bad("run_id"))?,
            iteration: f[1].parse().map_err(|_| bad("iteration"))?,
            cumulative_uploads: f[2].parse().map_err(|_| bad("cumulative_uploads"))?,
            cumulative_broadcasts: f[3].parse().map_err(|_| bad("cumulative_broadcasts"))?,
            avg_reward: f[4].parse().map_err(|_| bad("avg_reward"))?,
            grad_norm: f[5].parse().map_err(|_| bad("grad_norm"))?,
            lyapunov: match f[6] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("lyapunov"))?),
            },
            uploads_mask: f[7].to_string(),
        })
    }
}

pub fn run_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(RUN_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn read_run_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(RUN_HEADER) {
        return Err(Error::config(format!("{}: unexpected header", path.display())));
    }
    lines.map(MetricsRow::parse).collect()
}

/// Per-iteration summary across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    /// Runs that reached this iteration.
    pub runs: usize,
    pub cumulative_uploads_mean: f64,
    pub cumulative_uploads_half_std: f64,
    pub cumulative_broadcasts_mean: f64,
    pub avg_reward_mean: f64,
    pub avg_reward_half_std: f64,
    pub grad_norm_mean: f64,
    /// Mean over the runs that report a Lyapunov value.
    pub lyapunov_mean: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Half of the population standard deviation.
fn half_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    0.5 * (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Aggregates runs row by row; iteration `k` averages every run that reached it.
pub fn aggregate(runs: &[Vec<MetricsRow>]) -> Vec<AggregateRow> {
    let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let rows: Vec<&MetricsRow> = runs.iter().filter_map(|r| r.get(i)).collect();
            let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let uploads = col(|r| r.cumulative_uploads as f64);
            let reward = col(|r| r.avg_reward);
            let lyap: Vec<f64> = rows.iter().filter_map(|r| r.lyapunov).collect();
            AggregateRow {
                iteration: rows[0].iteration,
                runs: rows.len(),
                cumulative_uploads_mean: mean(&uploads),
                cumulative_uploads_half_std: half_std(&uploads),
                cumulative_broadcasts_mean: mean(&col(|r| r.cumulative_broadcasts as f64)),
                avg_reward_mean: mean(&reward),
                avg_reward_half_std: half_std(&reward),
                grad_norm_mean: mean(&col(|r| r.grad_norm)),
                lyapunov_mean: (!lyap.is_empty()).then(|| mean(&lyap)),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.runs,
            r.cumulative_uploads_mean,
            r.cumulative_uploads_half_std,
            r.cumulative_broadcasts_mean,
            r.avg_reward_mean,
            r.avg_reward_half_std,
            r.grad_norm_mean,
            r.lyapunov_mean.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    out
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(AGGREGATE_HEADER) {
        return Err(Error::config(format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::config(format!("bad aggregate row: {line}"));
            if f.len() != 9 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(AggregateRow {
                iteration: f[0].parse().map_err(|_| bad())?,
                runs: f[1].parse().map_err(|_| bad())?,
                cumulative_uploads_mean: num(2)?,
                cumulative_uploads_half_std: num(3)?,
                cumulative_broadcasts_mean: num(4)?,
                avg_reward_mean: num(5)?,
                avg_reward_half_std: num(6)?,
                grad_norm_mean: num(7)?,
                lyapunov_mean: if f[8].is_empty() { None } else { Some(num(8)?) },
            })
        })
        .collect()
}
