//! CSV artifacts and their re-reading.
//!
//! * `metrics.csv`: `step,split,loss,wallclock_s,seed,run_id`, one `train`
//!   and one `eval` row per evaluation step (step 0 has only `eval`).
//! * `speedup.csv`: `run_id,activation,rank,final_eval_loss,steps_to_reach,step_speedup,wallclock_speedup,param_overhead_pct`,
//!   one row per run. Failed runs carry `failed`, unreached targets `not_reached`.
//! * `summary.csv`: medians over seeds per variant.
//! * `timing.csv`: measured mean step time per run.
//! * `diagnostics.csv`: spectral component fits (regression task only).
//! * `config.snapshot`: the resolved configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::ablation::{GridReport, SpeedupRow};
use crate::harness::config::RunConfig;
use crate::harness::metrics::median;

pub const METRICS_HEADER: &str = "step,split,loss,wallclock_s,seed,run_id";
pub const SPEEDUP_HEADER: &str =
    "run_id,activation,rank,final_eval_loss,steps_to_reach,step_speedup,wallclock_speedup,param_overhead_pct";
pub const SUMMARY_HEADER: &str = "variant,activation,rank,seeds,finished,median_final_eval_loss,median_step_speedup,median_wallclock_speedup,param_overhead_pct";
pub const TIMING_HEADER: &str = "run_id,steps,mean_step_time_s";
pub const DIAGNOSTICS_HEADER: &str = "run_id,eval_mse,smooth_gain,residual_gain";

/// Writes `contents` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>, failed: bool) -> String {
    match (v, failed) {
        (_, true) => "failed".into(),
        (Some(x), false) => format!("{x}"),
        (None, false) => "not_reached".into(),
    }
}

fn activation(a: Option<crate::noble::ActivationKind>) -> String {
    a.map_or_else(|| "none".into(), |a| a.to_string())
}

pub fn metrics_csv(report: &GridReport) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for run in &report.runs {
        for r in &run.log.rows {
            if let Some(t) = r.train_loss {
                writeln!(s, "{},train,{},{},{},{}", r.step, t, r.wallclock_s, run.seed, run.run_id()).unwrap();
            }
            writeln!(s, "{},eval,{},{},{},{}", r.step, r.eval_loss, r.wallclock_s, run.seed, run.run_id()).unwrap();
        }
    }
    s
}

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut s = format!("{SPEEDUP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.run_id,
            activation(r.activation),
            r.rank,
            opt(r.final_eval_loss, r.failed),
            opt(r.steps_to_reach, r.failed),
            opt(r.step_speedup, r.failed),
            opt(r.wallclock_speedup, r.failed),
            r.param_overhead_pct
        )
        .unwrap();
    }
    s
}

pub fn summary_csv(report: &GridReport) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in &report.summary {
        let failed = r.finished == 0;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant,
            activation(r.activation),
            r.rank,
            r.seeds,
            r.finished,
            opt(r.median_final_eval_loss, failed),
            opt(r.median_step_speedup, failed),
            opt(r.median_wallclock_speedup, failed),
            r.param_overhead_pct
        )
        .unwrap();
    }
    s
}

/// Writes every artifact into `dir` (created if missing); returns the paths.
pub fn emit_reports(report: &GridReport, cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut timing = format!("{TIMING_HEADER}\n");
    for run in &report.runs {
        let t = run.mean_step_time().map_or_else(|| "na".into(), |t| format!("{t:.6e}"));
        writeln!(timing, "{},{},{}", run.run_id(), run.step_times.len(), t).unwrap();
    }
    let mut files = vec![
        ("metrics.csv", metrics_csv(report)),
        ("speedup.csv", speedup_csv(&report.rows)),
        ("summary.csv", summary_csv(report)),
        ("timing.csv", timing),
        ("config.snapshot", cfg.snapshot()?),
    ];
    if report.runs.iter().any(|r| r.diagnostics.is_some()) {
        let mut d = format!("{DIAGNOSTICS_HEADER}\n");
        for run in &report.runs {
            if let Some(g) = run.diagnostics {
                writeln!(d, "{},{},{},{}", run.run_id(), g.mse, g.smooth_gain, g.residual_gain).unwrap();
            }
        }
        files.push(("diagnostics.csv", d));
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

/// A parsed `speedup.csv` row with numeric fields where present.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedSpeedup {
    pub run_id: String,
    pub activation: String,
    pub rank: usize,
    pub final_eval_loss: Option<f64>,
    pub step_speedup: Option<f64>,
    pub wallclock_speedup: Option<f64>,
    pub param_overhead_pct: f64,
    pub failed: bool,
}

pub fn read_speedup(path: &Path) -> Result<Vec<ParsedSpeedup>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SPEEDUP_HEADER) {
        return Err(Error::Format(format!("{} does not start with the speedup header", path.display())));
    }
    let num = |s: &str| s.parse::<f64>().ok();
    lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 8 {
                return Err(Error::Format(format!("malformed speedup row {l:?}")));
            }
            Ok(ParsedSpeedup {
                run_id: c[0].into(),
                activation: c[1].into(),
                rank: c[2].parse().map_err(|_| Error::Format(format!("bad rank in {l:?}")))?,
                final_eval_loss: num(c[3]),
                step_speedup: num(c[5]),
                wallclock_speedup: num(c[6]),
                param_overhead_pct: num(c[7]).unwrap_or(0.0),
                failed: c[3] == "failed",
            })
        })
        .collect()
}

/// Checks `metrics.csv` invariants: fixed header, finite losses, increasing
/// steps per run and split. Returns the number of rows.
pub fn check_metrics(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{} does not start with the metrics header", path.display())));
    }
    let mut last: std::collections::HashMap<(String, String), u64> = Default::default();
    let mut n = 0;
    for l in lines {
        let c: Vec<&str> = l.split(',').collect();
        let bad = || Error::Format(format!("malformed metrics row {l:?}"));
        if c.len() != 6 {
            return Err(bad());
        }
        let step: u64 = c[0].parse().map_err(|_| bad())?;
        let loss: f64 = c[2].parse().map_err(|_| bad())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss in metrics row {l:?}")));
        }
        let key = (c[5].to_string(), c[1].to_string());
        if last.get(&key).is_some_and(|&prev| step <= prev) {
            return Err(Error::Format(format!("steps not increasing for {} {}", c[5], c[1])));
        }
        last.insert(key, step);
        n += 1;
    }
    Ok(n)
}

/// Human-readable medians per variant from a report directory's `speedup.csv`.
pub fn summarize_dir(dir: &Path) -> Result<String> {
    let rows = read_speedup(&dir.join("speedup.csv"))?;
    let metrics = dir.join("metrics.csv");
    if metrics.exists() {
        check_metrics(&metrics)?;
    }
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        let v = variant_of(&r.run_id);
        if !order.contains(&v) {
            order.push(v);
        }
    }
    let mut out = format!(
        "{:<24} {:>6} {:>8} {:>12} {:>9} {:>9} {:>9}\n",
        "variant", "seeds", "failed", "final_loss", "step_x", "wall_x", "params+%"
    );
    for v in order {
        let mine: Vec<&ParsedSpeedup> = rows.iter().filter(|r| variant_of(&r.run_id) == v).collect();
        let med = |f: fn(&ParsedSpeedup) -> Option<f64>| {
            median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>()).map_or_else(|| "-".into(), |x| format!("{x:.4}"))
        };
        writeln!(
            out,
            "{:<24} {:>6} {:>8} {:>12} {:>9} {:>9} {:>9.2}",
            v,
            mine.len(),
            mine.iter().filter(|r| r.failed).count(),
            med(|r| r.final_eval_loss),
            med(|r| r.step_speedup),
            med(|r| r.wallclock_speedup),
            mine[0].param_overhead_pct
        )
        .unwrap();
    }
    Ok(out)
}

fn variant_of(run_id: &str) -> String {
    match run_id.rfind("-s") {
        Some(i) => run_id[..i].to_string(),
        None => run_id.to_string(),
    }
}
