//! `cfkin`: batch driver for the coagulation-fragmentation experiments.
//!
//! Exit status: 0 when every verdict passes, 1 when one fails or a run
//! breaks down, 2 for configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use cfkin_core::dynamics::InitialData;
use cfkin_core::scenario::{self, RunConfig, ScenarioError, ScenarioKind};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cfkin",
    version,
    about = "Coagulation-fragmentation kinetics under detailed balance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for randomized initial data and probes; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate one trajectory and record diagnostics.
    Simulate(Common),
    /// Solve for the equilibrium of a given mass.
    Equilibrium {
        #[command(flatten)]
        common: Common,
        /// Mass of the equilibrium; overrides `initial.rho`.
        #[arg(long)]
        rho: Option<f64>,
        /// Truncation size used for the written profile.
        #[arg(long)]
        n: Option<usize>,
        /// Also write `equilibrium_profile.csv`.
        #[arg(long)]
        profile: bool,
    },
    /// Randomized sweeps over the inequality evaluators.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Suite name or `all`.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Extra copy of the JSON report at this path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare runs at increasing truncation sizes.
    TruncationStudy(Common),
    /// Track the decay of the relative energy.
    RateStudy(Common),
    /// Judge the long-time limit against the regime of the initial mass.
    ConvergenceStudy(Common),
}

const DEFAULT_N: usize = 200;

fn load(common: &Common, kind: ScenarioKind, standalone: bool) -> Result<RunConfig, ScenarioError> {
    let mut cfg = match &common.config {
        Some(path) => scenario::parse_config(path)?,
        None if standalone => RunConfig::new(kind, DEFAULT_N),
        None => {
            return Err(ScenarioError::Config(format!(
                "{kind:?} needs --config <file.toml>"
            )))
        }
    };
    cfg.scenario = kind;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn build(cli: &Cli) -> Result<(RunConfig, Option<PathBuf>), ScenarioError> {
    Ok(match &cli.command {
        Command::Simulate(c) => (load(c, ScenarioKind::Simulate, false)?, None),
        Command::TruncationStudy(c) => (load(c, ScenarioKind::TruncationStudy, false)?, None),
        Command::RateStudy(c) => (load(c, ScenarioKind::RateStudy, false)?, None),
        Command::ConvergenceStudy(c) => (load(c, ScenarioKind::ConvergenceStudy, false)?, None),
        Command::Equilibrium {
            common,
            rho,
            n,
            profile,
        } => {
            let mut cfg = load(common, ScenarioKind::Equilibrium, true)?;
            if let Some(rho) = rho {
                match cfg.initial.as_mut() {
                    Some(init) if init.rho().is_some() => init.set_rho(*rho),
                    _ => cfg.initial = Some(InitialData::Monodisperse { rho: *rho }),
                }
            }
            if let Some(n) = n {
                cfg.n = *n;
            }
            cfg.study.write_profile |= *profile;
            (cfg, None)
        }
        Command::Probe {
            common,
            suite,
            trials,
            report,
        } => {
            let mut cfg = load(common, ScenarioKind::Probe, true)?;
            if let Some(s) = suite {
                cfg.probe.suite = s.clone();
            }
            if let Some(t) = trials {
                cfg.probe.trials = *t;
            }
            (cfg, report.clone())
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, extra_report) = match build(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match scenario::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_config() { 2 } else { 1 });
        }
    };
    if let Some(path) = extra_report {
        let text =
            serde_json::to_string_pretty(&outcome.report).expect("report is valid JSON") + "\n";
        if let Err(e) = std::fs::write(&path, text) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    let verdict = if outcome.passed { "pass" } else { "fail" };
    println!("{:?}: {verdict}", cfg.scenario);
    if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
