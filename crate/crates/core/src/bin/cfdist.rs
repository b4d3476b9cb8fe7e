//! Command-line front end for the replication harness.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or i/o error,
//! 4 numeric failure. A run with failed replicates still writes its report
//! and then exits with the first failure's code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cfdist::bench::{emit_report, run_experiment, Experiment, ExperimentSpec};
use cfdist::simgen::{self, BoundsDgpSpec, BoundsVariant, DgpSpec, IvDgpSpec, IvOutcome, IvTreatment, OracleTarget};
use cfdist::{Error, Result, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cfdist", version, about = "Counterfactual distribution bounds and representation-based IV estimation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration JSON (estimators, grid, folds, smoothing, VAE)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replications; overrides the config file
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Sample size per replicate
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Worker threads
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Monte Carlo draws for oracle truths
    #[arg(long, global = true, default_value_t = 200_000)]
    n_mc: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bound estimators on the covariate simulation design
    SimBounds {
        #[arg(long, value_enum, default_value_t = Variant::Linear)]
        variant: Variant,
        /// Use the true conditional CDFs and propensity
        #[arg(long)]
        oracle: bool,
    },
    /// Triple cross-fitted means and ATE on the binary instrument design
    SimIvAte {
        #[arg(long, value_enum, default_value_t = Outcome::Linear)]
        outcome: Outcome,
        /// Use the true latent confounder instead of the IV-VAE
        #[arg(long)]
        oracle: bool,
    },
    /// Dose-response curves on the continuous instrument design
    SimDose {
        #[arg(long, value_enum, default_value_t = Outcome::Nonlinear)]
        outcome: Outcome,
        #[arg(long)]
        oracle: bool,
    },
    /// Bound estimators conditioning on the learned IV-VAE latent
    BoundsOnRep {
        #[arg(long, value_enum, default_value_t = Outcome::Linear)]
        outcome: Outcome,
        #[arg(long)]
        oracle: bool,
    },
    /// Fit a user table with columns y, a and either x1..xd or s
    FitCsv {
        #[arg(long)]
        input: PathBuf,
    },
    /// Print the oracle truth of a target under a simulation design
    Oracle {
        #[arg(long, value_enum)]
        dgp: Dgp,
        /// Target as JSON, e.g. {"kind":"upper","y1":0.5,"y0":0.0}
        #[arg(long)]
        target: String,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Variant {
    Linear,
    Nonlinear,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Outcome {
    Linear,
    Nonlinear,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Dgp {
    BoundsLinear,
    BoundsNonlinear,
    IvLinearBinary,
    IvNonlinearBinary,
    IvLinearContinuous,
    IvNonlinearContinuous,
}

impl From<Variant> for BoundsVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Linear => BoundsVariant::LinearScm,
            Variant::Nonlinear => BoundsVariant::Nonlinear,
        }
    }
}

impl From<Outcome> for IvOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Linear => IvOutcome::Linear,
            Outcome::Nonlinear => IvOutcome::Nonlinear,
        }
    }
}

impl Dgp {
    fn spec(self) -> DgpSpec {
        let iv = |outcome, treatment| DgpSpec::Iv(IvDgpSpec { outcome, treatment, n: 2, seed: 0 });
        match self {
            Dgp::BoundsLinear => DgpSpec::Bounds(BoundsDgpSpec { variant: BoundsVariant::LinearScm, n: 2, seed: 0 }),
            Dgp::BoundsNonlinear => DgpSpec::Bounds(BoundsDgpSpec { variant: BoundsVariant::Nonlinear, n: 2, seed: 0 }),
            Dgp::IvLinearBinary => iv(IvOutcome::Linear, IvTreatment::Binary),
            Dgp::IvNonlinearBinary => iv(IvOutcome::Nonlinear, IvTreatment::Binary),
            Dgp::IvLinearContinuous => iv(IvOutcome::Linear, IvTreatment::Continuous),
            Dgp::IvNonlinearContinuous => iv(IvOutcome::Nonlinear, IvTreatment::Continuous),
        }
    }
}

/// Config file, plus whether it set `replications` explicitly.
fn load_config(path: Option<&PathBuf>) -> Result<(RunConfig, bool)> {
    let Some(p) = path else {
        return Ok((RunConfig::default(), false));
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let has_reps = value.get("replications").is_some();
    Ok((RunConfig::from_json(&text)?, has_reps))
}

fn run(cli: Cli) -> Result<i32> {
    let g = &cli.global;
    let (mut cfg, cfg_reps) = load_config(g.config.as_ref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let (experiment, oracle, default_reps, default_n, dir) = match &cli.command {
        Command::SimBounds { variant, oracle } => {
            (Experiment::BoundsSim { variant: (*variant).into() }, *oracle, 100, 2000, "sim-bounds")
        }
        Command::SimIvAte { outcome, oracle } => {
            (Experiment::IvAteSim { outcome: (*outcome).into() }, *oracle, 20, 6000, "sim-iv-ate")
        }
        Command::SimDose { outcome, oracle } => {
            (Experiment::DoseSim { outcome: (*outcome).into() }, *oracle, 20, 6000, "sim-dose")
        }
        Command::BoundsOnRep { outcome, oracle } => {
            (Experiment::BoundsOnRepresentation { outcome: (*outcome).into() }, *oracle, 20, 6000, "bounds-on-rep")
        }
        Command::FitCsv { input } => (Experiment::UserCsv { path: input.clone() }, false, 1, 0, "fit-csv"),
        Command::Oracle { dgp, target } => {
            let t: OracleTarget = serde_json::from_str(target).map_err(|e| Error::InvalidConfig(format!("target: {e}")))?;
            let truth = simgen::oracle_truth(&dgp.spec(), &t, g.n_mc, cfg.seed)?;
            let json = serde_json::to_string_pretty(&truth)?;
            println!("{json}");
            if let Some(out) = &g.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("oracle.json"), json)?;
            }
            return Ok(0);
        }
    };
    let replications = g.reps.unwrap_or(if cfg_reps { cfg.replications } else { default_reps });
    cfg.replications = replications;
    let spec = ExperimentSpec {
        experiment,
        replications,
        n: g.n.unwrap_or(default_n),
        base_seed: cfg.seed,
        config: cfg,
        oracle,
        n_mc: g.n_mc,
        jobs: g.jobs,
        out_dir: Some(g.out.clone().unwrap_or_else(|| PathBuf::from("cfdist-out").join(dir))),
    };
    let report = run_experiment(&spec)?;
    let out = spec.out_dir.as_ref().expect("set above");
    emit_report(&report, out)?;
    for a in &report.aggregates {
        eprintln!(
            "{:<12} {:<5} x1={:<10.4} x2={:<10.4} mean={:<10.5} bias={:<10.5} se={:<9.5} mse={:.5}",
            a.estimator, a.target, a.x1, a.x2, a.mean_estimate, a.bias, a.se, a.mse
        );
    }
    eprintln!("wrote {} ({:.1}s)", out.display(), report.wall_clock_seconds);
    if let Some(f) = report.first_failure() {
        eprintln!("{} of {} replicates failed; first: {}", report.failures.len(), replications, f.error);
        return Ok(f.exit_code);
    }
    if !report.missing_estimators.is_empty() {
        eprintln!("estimators without results: {}", report.missing_estimators.join(", "));
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
