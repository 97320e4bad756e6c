use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use noble::harness::report::summarize_dir;
use noble::harness::suite::{run_suite, SuiteModule};
use noble::harness::{emit_reports, run_ablation_grid, run_variants, GridReport, RunConfig, Variant};
use noble::{ActivationKind, NobleSpec};

#[derive(Parser)]
#[command(name = "noble", version, about = "Train and compare linear layers with nonlinear low-rank branches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline and the configured branch variant for every seed.
    Train { config: PathBuf },
    /// Run an activation × rank grid.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        activations: Option<Vec<ActivationKind>>,
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
    },
    /// Run the configured activation at every rank of the sweep section.
    SweepRank { config: PathBuf },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
    },
    /// Summarize a report directory.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Noble,
    Model,
}

fn finish(report: &GridReport, cfg: &RunConfig, dir: &Path) -> noble::Result<bool> {
    emit_reports(report, cfg, dir)?;
    print!("{}", summarize_dir(dir)?);
    println!("reports written to {}", dir.display());
    let mut ok = true;
    for run in report.runs.iter().filter(|r| !r.finished()) {
        eprintln!("run {} failed: {:?}", run.run_id(), run.status);
        ok = false;
    }
    for v in report.invariant_violations() {
        eprintln!("invariant violated: {v}");
        ok = false;
    }
    Ok(ok)
}

fn out_dir(cfg: &RunConfig, sub: &str) -> PathBuf {
    cfg.run.output_dir.join(&cfg.run.name).join(sub)
}

fn run(cli: Cli) -> noble::Result<bool> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let variants: Vec<Variant> = cfg.noble_spec().map(Variant::with).into_iter().collect();
            let report = run_variants(&cfg, &variants)?;
            finish(&report, &cfg, &out_dir(&cfg, "train"))
        }
        Command::Ablate { config, activations, ranks } => {
            let cfg = RunConfig::load(&config)?;
            let acts = activations.unwrap_or_else(|| cfg.sweep.activations.clone());
            let ranks = ranks.unwrap_or_else(|| vec![cfg.noble.spec.rank]);
            let report = run_ablation_grid(&cfg, &acts, &ranks)?;
            finish(&report, &cfg, &out_dir(&cfg, "ablate"))
        }
        Command::SweepRank { config } => {
            let cfg = RunConfig::load(&config)?;
            let variants: Vec<Variant> = cfg
                .sweep
                .ranks
                .iter()
                .map(|&rank| Variant::with(NobleSpec { rank, ..cfg.noble.spec }))
                .collect();
            let report = run_variants(&cfg, &variants)?;
            finish(&report, &cfg, &out_dir(&cfg, "sweep-rank"))
        }
        Command::Gradcheck { module } => {
            let module = match module {
                ModuleArg::All => SuiteModule::All,
                ModuleArg::Noble => SuiteModule::Noble,
                ModuleArg::Model => SuiteModule::Model,
            };
            let mut ok = true;
            for c in run_suite(module)? {
                let verdict = if c.passed() { "pass" } else { "FAIL" };
                println!("{verdict} {:<40} max_rel_error={:.3e} tol={:.0e}", c.name, c.report.max_rel_error, c.tol);
                ok &= c.passed();
            }
            Ok(ok)
        }
        Command::Report { dir } => {
            print!("{}", summarize_dir(&dir)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
