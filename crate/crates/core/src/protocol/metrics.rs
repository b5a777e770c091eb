//! Per-session evaluation records and the metrics CSV.

use crate::error::{Error, Result};

/// Metrics of one completed session, all accuracies in `[0, 1]`. Fields
/// that need new classes are absent until the first incremental session.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub session: usize,
    pub top1: f64,
    pub base_acc: f64,
    pub new_acc: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub mean_acc: Option<f64>,
}

impl MetricRecord {
    pub fn from_splits(session: usize, top1: f64, base_acc: f64, new_acc: Option<f64>) -> Self {
        let harmonic_mean = new_acc.map(|n| {
            if base_acc + n == 0.0 {
                0.0
            } else {
                2.0 * base_acc * n / (base_acc + n)
            }
        });
        let mean_acc = new_acc.map(|n| (base_acc + n) / 2.0);
        MetricRecord { session, top1, base_acc, new_acc, harmonic_mean, mean_acc }
    }
}

/// Accuracy drop from the first session to the last, in percentage points.
pub fn performance_drop(history: &[MetricRecord]) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::arg(format!(
            "performance_drop needs at least 2 sessions, have {}",
            history.len()
        )));
    }
    Ok((history[0].top1 - history[history.len() - 1].top1) * 100.0)
}

pub const CSV_HEADER: &str = "session,top1,base_acc,new_acc,harmonic_mean,mean_acc,pd_so_far";

fn field(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

/// Full CSV for a history, absent values as empty fields. `pd_so_far` for
/// session t is the drop from session 0 to t in percentage points.
pub fn history_to_csv(history: &[MetricRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for rec in history {
        let pd = if rec.session == 0 {
            None
        } else {
            Some((history[0].top1 - rec.top1) * 100.0)
        };
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{},{}\n",
            rec.session,
            rec.top1,
            rec.base_acc,
            field(rec.new_acc),
            field(rec.harmonic_mean),
            field(rec.mean_acc),
            field(pd),
        ));
    }
    out
}

/// Parse a metrics CSV produced by [`history_to_csv`] (used by the report
/// command and by resumption checks).
pub fn csv_to_history(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "metrics csv: bad header {:?}",
                other.unwrap_or("<empty>")
            )))
        }
    }
    let mut history = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Format(format!("metrics csv row {}: {} columns", i + 1, cols.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("metrics csv row {}: bad number `{s}`", i + 1)))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        history.push(MetricRecord {
            session: cols[0]
                .parse()
                .map_err(|_| Error::Format(format!("metrics csv row {}: bad session", i + 1)))?,
            top1: num(cols[1])?,
            base_acc: num(cols[2])?,
            new_acc: opt(cols[3])?,
            harmonic_mean: opt(cols[4])?,
            mean_acc: opt(cols[5])?,
        });
    }
    Ok(history)
}
