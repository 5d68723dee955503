use std::fmt::Write as _;

use crate::distsim::{Phase, PhaseTimes};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,epoch,train_loss,valid_accuracy,sim_time,phase_forward,phase_backward,phase_grad_allreduce,phase_factor,phase_eigen,phase_precond,phase_bcast,kfac_bytes,peak_overhead_bytes";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Most recent evaluation; carried forward between `eval_every` points.
    pub valid_accuracy: f64,
    /// Simulated time of this step alone.
    pub sim_time: f64,
    pub phases: PhaseTimes,
    pub kfac_bytes: f64,
    pub peak_overhead_bytes: usize,
}

const PHASE_ORDER: [Phase; 7] = [
    Phase::Forward,
    Phase::Backward,
    Phase::GradAllreduce,
    Phase::FactorAllreduce,
    Phase::EigenBcast,
    Phase::Precond,
    Phase::PrecondGradBcast,
];

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{}",
            self.step, self.epoch, self.train_loss, self.valid_accuracy, self.sim_time
        );
        for p in PHASE_ORDER {
            let _ = write!(s, ",{}", self.phases.get(p));
        }
        let _ = write!(s, ",{},{}", self.kfac_bytes, self.peak_overhead_bytes);
        s
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 14 {
            return Err(Error::config(
                "metrics",
                format!("expected 14 columns, got {}", cols.len()),
            ));
        }
        fn p<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::config("metrics", format!("cannot parse `{s}`")))
        }
        let mut phases = PhaseTimes::default();
        for (i, ph) in PHASE_ORDER.iter().enumerate() {
            phases.0[ph.index()] = p(cols[5 + i])?;
        }
        Ok(Self {
            step: p(cols[0])?,
            epoch: p(cols[1])?,
            train_loss: p(cols[2])?,
            valid_accuracy: p(cols[3])?,
            sim_time: p(cols[4])?,
            phases,
            kfac_bytes: p(cols[12])?,
            peak_overhead_bytes: p(cols[13])?,
        })
    }
}

pub fn write_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::config("metrics", "missing or unexpected header")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::parse_csv_line)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub iterations: usize,
    pub target_metric: f64,
    /// Number of steps taken when validation accuracy first reached the target.
    pub steps_to_target: Option<usize>,
    /// Cumulative simulated time up to and including that step.
    pub sim_time_to_target: Option<f64>,
    pub final_train_loss: f64,
    pub final_valid_accuracy: f64,
    pub total_sim_time: f64,
    pub total_kfac_bytes: f64,
}

impl Summary {
    /// Everything here is a function of the metric rows.
    pub fn from_rows(rows: &[MetricsRow], target_metric: f64) -> Self {
        let mut elapsed = 0.0;
        let mut hit = None;
        for r in rows {
            elapsed += r.sim_time;
            if hit.is_none() && r.valid_accuracy >= target_metric {
                hit = Some((r.step + 1, elapsed));
            }
        }
        let last = rows.last();
        Self {
            iterations: rows.len(),
            target_metric,
            steps_to_target: hit.map(|h| h.0),
            sim_time_to_target: hit.map(|h| h.1),
            final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            final_valid_accuracy: last.map_or(f64::NAN, |r| r.valid_accuracy),
            total_sim_time: elapsed,
            total_kfac_bytes: rows.iter().map(|r| r.kfac_bytes).sum(),
        }
    }

    pub fn reached(&self) -> bool {
        self.steps_to_target.is_some()
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "not reached".to_string());
        let mut s = String::new();
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "target_metric = {}", self.target_metric);
        let _ = writeln!(
            s,
            "steps_to_target = {}",
            opt(self.steps_to_target.map(|v| v.to_string()))
        );
        let _ = writeln!(
            s,
            "sim_time_to_target = {}",
            opt(self.sim_time_to_target.map(|v| v.to_string()))
        );
        let _ = writeln!(s, "final_train_loss = {}", self.final_train_loss);
        let _ = writeln!(s, "final_valid_accuracy = {}", self.final_valid_accuracy);
        let _ = writeln!(s, "total_sim_time = {}", self.total_sim_time);
        let _ = writeln!(s, "total_kfac_bytes = {}", self.total_kfac_bytes);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, acc: f64) -> MetricsRow {
        let mut phases = PhaseTimes::default();
        phases.0[Phase::EigenBcast.index()] = 0.1 + step as f64 / 3.0;
        MetricsRow {
            step,
            epoch: step / 5,
            train_loss: 1.0 / (step + 1) as f64,
            valid_accuracy: acc,
            sim_time: phases.total() + 1.0,
            phases,
            kfac_bytes: 96.0 * step as f64,
            peak_overhead_bytes: 4096,
        }
    }

    #[test]
    fn csv_parses_back_losslessly() {
        let rows: Vec<_> = (0..12).map(|s| row(s, s as f64 / 11.0)).collect();
        let text = write_csv(&rows);
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn summary_first_crossing() {
        let rows = vec![row(0, 0.5), row(1, 0.96), row(2, 0.9), row(3, 0.97)];
        let s = Summary::from_rows(&rows, 0.95);
        assert_eq!(s.steps_to_target, Some(2));
        assert_eq!(s.sim_time_to_target, Some(rows[0].sim_time + rows[1].sim_time));
        assert!(Summary::from_rows(&rows, 1.01)
            .to_text()
            .contains("steps_to_target = not reached"));
    }
}
