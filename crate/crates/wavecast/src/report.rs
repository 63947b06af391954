//! Report files (JSON plus flat CSV rows) and the terminal summary.

use std::fmt::Write as _;
use std::path::Path;

use wavecast_core::metrics::MetricReport;
use wavecast_core::pipeline::ExperimentReport;

use crate::error::{AppError, AppResult};

pub const CSV_HEADER: &str = "protocol,dataset,horizon,scale,noise_factor,mse,mae,msae,smape,mase,owa";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Horizon keys are strings, so map order is lexical.
fn by_horizon<'a>(m: impl Iterator<Item = &'a MetricReport>) -> Vec<&'a MetricReport> {
    let mut v: Vec<_> = m.collect();
    v.sort_by_key(|m| m.horizon);
    v
}

fn row(r: &ExperimentReport, scale: &str, noise: f64, m: &MetricReport) -> String {
    format!(
        "{},{},{},{scale},{noise},{:.6},{:.6},{},{:.6},{},{}",
        r.protocol,
        r.dataset,
        m.horizon,
        m.mse,
        m.mae,
        opt(m.msae),
        m.smape,
        opt(m.mase),
        opt(m.owa)
    )
}

/// One line per horizon and scale, plus one per noise factor.
pub fn csv_rows(r: &ExperimentReport) -> Vec<String> {
    let mut rows: Vec<String> = by_horizon(r.horizons.values()).into_iter().map(|m| row(r, "normalized", 0.0, m)).collect();
    rows.extend(by_horizon(r.raw_horizons.values()).into_iter().map(|m| row(r, "raw", 0.0, m)));
    for n in &r.noise {
        rows.extend(by_horizon(n.horizons.values()).into_iter().map(|m| row(r, "normalized", n.factor, m)));
    }
    rows
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn write(dir: &Path, stem: &str, r: &ExperimentReport) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let json = serde_json::to_string_pretty(r).map_err(|e| AppError::Data(e.to_string()))?;
    let jp = dir.join(format!("{stem}.json"));
    std::fs::write(&jp, json).map_err(|e| AppError::io(&jp, e))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for line in csv_rows(r) {
        csv.push_str(&line);
        csv.push('\n');
    }
    let cp = dir.join(format!("{stem}.csv"));
    std::fs::write(&cp, csv).map_err(|e| AppError::io(&cp, e))
}

pub fn summary(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} on {} (seed {}, {:.1}s)", r.protocol, r.dataset, r.seed, r.runtime_s);
    let short = r.horizons.values().any(|m| m.mase.is_some());
    let _ = write!(s, "{:>8} {:>10} {:>10} {:>10} {:>10}", "horizon", "MSE", "MAE", "MSAE", "SMAPE");
    if short {
        let _ = write!(s, " {:>10} {:>10}", "MASE", "OWA");
    }
    s.push('\n');
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for m in by_horizon(r.horizons.values()) {
        let _ = write!(s, "{:>8} {:>10.4} {:>10.4} {:>10} {:>10.4}", m.horizon, m.mse, m.mae, fmt(m.msae), m.smape);
        if short {
            let _ = write!(s, " {:>10} {:>10}", fmt(m.mase), fmt(m.owa));
        }
        s.push('\n');
    }
    for n in &r.noise {
        for m in by_horizon(n.horizons.values()) {
            let _ = writeln!(s, "noise {:<4} T={:<4} MSE {:.4}  MAE {:.4}", n.factor, m.horizon, m.mse, m.mae);
        }
    }
    s
}
