//! Summaries of training-log CSV files.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::training::{LogRow, LOG_HEADER};

pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(Error::Format("training log lacks the expected header".into()));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("log line {}: malformed row", n + 2));
        if f.len() != 11 {
            return Err(bad());
        }
        let x = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
        rows.push(LogRow {
            step: f[0].trim().parse().map_err(|_| bad())?,
            epoch: f[1].trim().parse().map_err(|_| bad())?,
            lr: x(2)?,
            loss: LossReport {
                total: x(3)?,
                s2s: x(4)?,
                ctc: x(5)?,
                l1: x(6)?,
                bce: x(7)?,
                guided: x(8)?,
                ..LossReport::default()
            },
            grad_norm: x(9)?,
            wall_ms: f[10].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub last_total: f64,
    pub mean_grad_norm: f64,
    pub last_lr: f64,
}

pub fn epoch_summaries(rows: &[LogRow]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(s) if s.epoch == r.epoch => {
                s.steps += 1;
                s.mean_total += r.loss.total;
                s.mean_grad_norm += r.grad_norm;
                s.last_total = r.loss.total;
                s.last_lr = r.lr;
            }
            _ => out.push(EpochSummary {
                epoch: r.epoch,
                steps: 1,
                mean_total: r.loss.total,
                last_total: r.loss.total,
                mean_grad_norm: r.grad_norm,
                last_lr: r.lr,
            }),
        }
    }
    for s in &mut out {
        s.mean_total /= s.steps as f64;
        s.mean_grad_norm /= s.steps as f64;
    }
    out
}

/// Curve summary of a log, with a per-epoch table when `per_epoch`.
pub fn report(text: &str, per_epoch: bool) -> Result<String> {
    let rows = parse_log(text)?;
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Data("training log has no rows".into())),
    };
    let best = rows.iter().map(|r| r.loss.total).fold(f64::INFINITY, f64::min);
    let peak = rows.iter().max_by(|a, b| a.lr.total_cmp(&b.lr)).expect("non-empty");
    let mut s = String::new();
    let _ = writeln!(s, "steps: {}  epochs: {}", rows.len(), last.epoch);
    let _ = writeln!(
        s,
        "loss: first {:.6}  last {:.6}  min {:.6}",
        first.loss.total, last.loss.total, best
    );
    let _ = writeln!(s, "lr: peak {:.3e} at step {}  final {:.3e}", peak.lr, peak.step, last.lr);
    if last.wall_ms > 0 {
        let _ = writeln!(s, "wall: {:.1} s", last.wall_ms as f64 / 1000.0);
    }
    if per_epoch {
        let _ = writeln!(s, "epoch,steps,mean_total,last_total,mean_grad_norm,last_lr");
        for e in epoch_summaries(&rows) {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.4},{:.3e}",
                e.epoch, e.steps, e.mean_total, e.last_total, e.mean_grad_norm, e.last_lr
            );
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::log_csv;

    #[test]
    fn log_round_trip_and_summary() {
        let rows: Vec<LogRow> = (1..=4)
            .map(|i| LogRow {
                step: i,
                epoch: 1 + (i as usize - 1) / 2,
                lr: 0.1 * i as f64,
                loss: LossReport {
                    total: 10.0 / i as f64,
                    ..LossReport::default()
                },
                grad_norm: 1.0,
                wall_ms: 0,
            })
            .collect();
        let text = log_csv(&rows);
        assert_eq!(parse_log(&text).unwrap(), rows);
        let e = epoch_summaries(&rows);
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].mean_total, (10.0 / 3.0 + 2.5) / 2.0);
        let r = report(&text, true).unwrap();
        assert!(r.contains("steps: 4") && r.contains("2,2,"));
        assert!(parse_log("nope\n").is_err());
    }
}
