//! Baseline-versus-variant comparisons over seeds and activation × rank grids.

use rayon::prelude::*;

use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::metrics::{compare, median};
use crate::harness::run::{train_with_data, RunOutcome, RunStatus, TaskData, Variant};
use crate::noble::{ActivationKind, NobleSpec};

/// One `speedup.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub run_id: String,
    pub variant: String,
    pub activation: Option<ActivationKind>,
    pub rank: usize,
    pub seed: u64,
    pub failed: bool,
    pub final_eval_loss: Option<f64>,
    pub steps_to_reach: Option<f64>,
    pub step_speedup: Option<f64>,
    pub wallclock_speedup: Option<f64>,
    pub param_overhead_pct: f64,
    pub mean_step_time: Option<f64>,
}

/// Medians over seeds for one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub activation: Option<ActivationKind>,
    pub rank: usize,
    pub seeds: usize,
    pub finished: usize,
    pub median_final_eval_loss: Option<f64>,
    pub median_step_speedup: Option<f64>,
    pub median_wallclock_speedup: Option<f64>,
    pub median_step_time: Option<f64>,
    pub param_overhead_pct: f64,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    /// Variants in report order; the baseline is first.
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Variant-major, seed-minor.
    pub runs: Vec<RunOutcome>,
    pub rows: Vec<SpeedupRow>,
    pub summary: Vec<SummaryRow>,
}

impl GridReport {
    pub fn all_finished(&self) -> bool {
        self.runs.iter().all(RunOutcome::finished)
    }

    pub fn summary_for(&self, name: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.variant == name)
    }

    pub fn rows_for(&self, name: &str) -> impl Iterator<Item = &SpeedupRow> {
        let name = name.to_string();
        self.rows.iter().filter(move |r| r.variant == name)
    }

    /// Violated bookkeeping invariants, empty when consistent.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for r in self.rows_for("baseline") {
            if !r.failed && r.step_speedup != Some(1.0) {
                v.push(format!("{}: baseline step speedup {:?} != 1", r.run_id, r.step_speedup));
            }
        }
        for (row, run) in self.rows.iter().zip(&self.runs) {
            if run.finished() && (row.param_overhead_pct - run.params.overhead_pct()).abs() > 0.0 {
                v.push(format!("{}: overhead disagrees with parameter counts", row.run_id));
            }
            if run.log.rows.windows(2).any(|w| w[1].step <= w[0].step) {
                v.push(format!("{}: steps not increasing", row.run_id));
            }
        }
        v
    }
}

/// Trains the baseline and every variant for every configured seed.
pub fn run_variants(cfg: &RunConfig, variants: &[Variant]) -> Result<GridReport> {
    cfg.validate()?;
    let mut all = vec![Variant::baseline()];
    all.extend(variants.iter().filter(|v| v.noble.is_some()).cloned());
    let seeds = cfg.run.seeds.clone();

    let cells: Vec<(usize, u64)> = (0..all.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let data: Vec<Result<TaskData>> = seeds.iter().map(|&s| TaskData::build(cfg, s)).collect();
    let work = |&(vi, seed): &(usize, u64)| -> RunOutcome {
        let si = seeds.iter().position(|&s| s == seed).expect("seed listed");
        match &data[si] {
            Ok(d) => train_with_data(cfg, &all[vi], seed, d),
            Err(e) => failed_outcome(&all[vi], seed, e.to_string()),
        }
    };
    let runs: Vec<RunOutcome> = if cfg.run.parallel {
        cells.par_iter().map(work).collect()
    } else {
        cells.iter().map(work).collect()
    };
    Ok(assemble(all, seeds, runs))
}

/// One run per (activation, rank, seed) plus one baseline per seed.
pub fn run_ablation_grid(cfg: &RunConfig, activations: &[ActivationKind], ranks: &[usize]) -> Result<GridReport> {
    let variants: Vec<Variant> = activations
        .iter()
        .flat_map(|&a| {
            ranks.iter().map(move |&r| Variant::with(NobleSpec { rank: r, activation: a, ..cfg.noble.spec }))
        })
        .collect();
    run_variants(cfg, &variants)
}

fn failed_outcome(variant: &Variant, seed: u64, msg: String) -> RunOutcome {
    RunOutcome {
        variant: variant.clone(),
        seed,
        status: RunStatus::Failed(msg),
        log: crate::harness::metrics::MetricLog::new(variant.run_id(seed), seed),
        step_times: Vec::new(),
        params: crate::model::ParamCounts { base: 0, branch: 0 },
        diagnostics: None,
    }
}

fn assemble(variants: Vec<Variant>, seeds: Vec<u64>, runs: Vec<RunOutcome>) -> GridReport {
    let baseline_of = |seed: u64| runs.iter().find(|r| r.variant.noble.is_none() && r.seed == seed);
    let rows: Vec<SpeedupRow> = runs
        .iter()
        .map(|run| {
            let base = baseline_of(run.seed).filter(|b| b.finished());
            let cmp = match (base, run.finished()) {
                (Some(b), true) => compare(&b.log, &run.log).ok(),
                _ => None,
            };
            SpeedupRow {
                run_id: run.run_id().to_string(),
                variant: run.variant.name(),
                activation: run.variant.activation(),
                rank: run.variant.rank(),
                seed: run.seed,
                failed: !run.finished(),
                final_eval_loss: run.finished().then(|| run.log.final_eval_loss()).flatten(),
                steps_to_reach: cmp.and_then(|c| c.steps_to_reach),
                step_speedup: cmp.and_then(|c| c.step_speedup),
                wallclock_speedup: cmp.and_then(|c| c.wallclock_speedup),
                param_overhead_pct: if run.finished() { run.params.overhead_pct() } else { 0.0 },
                mean_step_time: run.mean_step_time(),
            }
        })
        .collect();
    let summary = variants
        .iter()
        .map(|v| {
            let name = v.name();
            let mine: Vec<&SpeedupRow> = rows.iter().filter(|r| r.variant == name).collect();
            let col = |f: fn(&SpeedupRow) -> Option<f64>| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                variant: name.clone(),
                activation: v.activation(),
                rank: v.rank(),
                seeds: mine.len(),
                finished: mine.iter().filter(|r| !r.failed).count(),
                median_final_eval_loss: col(|r| r.final_eval_loss),
                median_step_speedup: col(|r| r.step_speedup),
                median_wallclock_speedup: col(|r| r.wallclock_speedup),
                median_step_time: col(|r| r.mean_step_time),
                param_overhead_pct: mine.iter().find(|r| !r.failed).map_or(0.0, |r| r.param_overhead_pct),
            }
        })
        .collect();
    GridReport { variants, seeds, runs, rows, summary }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::from_toml(
            r#"
            [run]
            seeds = [0, 1]
            eval_every = 10
            parallel = false
            [task.spectral]
            batch_size = 16
            eval_size = 64
            [model.mlp]
            hidden = [16, 16]
            [noble]
            rank = 4
            [optim]
            warmup_steps = 5
            total_steps = 20
            "#,
        )
        .unwrap();
        cfg.run.output_dir = std::env::temp_dir();
        cfg
    }

    #[test]
    fn empty_grid_is_baseline_only() {
        let g = run_ablation_grid(&tiny(), &[], &[4]).unwrap();
        assert_eq!(g.rows.len(), 2);
        assert!(g.rows.iter().all(|r| r.variant == "baseline" && r.step_speedup == Some(1.0)));
        assert!(g.invariant_violations().is_empty());
    }

    #[test]
    fn grid_row_count_and_failure_isolation() {
        let mut cfg = tiny();
        cfg.optim.base_lr = 1e30;
        let g = run_ablation_grid(&cfg, &[ActivationKind::Tanh, ActivationKind::CosNet2Layer], &[2, 4]).unwrap();
        assert_eq!(g.rows.len(), 2 * 2 * 2 + 2);
        assert_eq!(g.summary.len(), 5);
        // A diverged run is marked, never aggregated as a number.
        for r in g.rows.iter().filter(|r| r.failed) {
            assert!(r.final_eval_loss.is_none() && r.step_speedup.is_none());
        }
        let cfg = tiny();
        let g = run_ablation_grid(&cfg, &[ActivationKind::Tanh], &[4]).unwrap();
        assert!(g.all_finished());
        assert!(g.rows.iter().all(|r| r.final_eval_loss.is_some_and(f64::is_finite)));
    }
}
