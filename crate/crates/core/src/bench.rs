//! Replicated experiments: seeds, truths, per-replicate estimates,
//! bias/SE/MSE aggregates and the files written for them.
//!
//! Replicate `r` always uses seed `mix(base_seed, r)` for its data, so the
//! estimator selection never changes what data a replicate sees. Output
//! files are sorted by replicate index; apart from the wall-clock entry in
//! `manifest.json` they are byte-identical across runs of the same spec.
//!
//! Files written by [`emit_report`]:
//!
//! * `replicates.csv`: [`REPLICATE_CSV_HEADER`], one row per estimate;
//! * `aggregates.csv`: [`AGGREGATE_CSV_HEADER`], one row per estimator and
//!   target;
//! * `plots.json`: boxplot quartiles, dose-response curves, width-reduction
//!   histograms and latent-recovery diagnostics;
//! * `manifest.json`: spec, seeds, grids, truths, failures, version and
//!   wall-clock;
//! * `failures.json`: only when some replicate failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{self, BoundEstimate, BoundKind, BoundSelection, PerPointNuisance};
use crate::data::{format_float, Dataset, RunConfig, TreatmentKind};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceConfig;
use crate::rng::{mix, seeded};
use crate::simgen::{
    self, BoundsDgpSpec, BoundsSample, BoundsVariant, DgpSpec, IvDgpSpec, IvOutcome, IvTreatment, OracleMethod,
    OracleTarget, IV_OUTCOME_SD,
};
use crate::stats::{mean, pearson, quantile, sd};
use crate::tml::{self, DoseGrid, Representation, RotationLatent, Target, TmlEstimate, MIN_TML_ROWS};
use crate::ivvae;

/// Smallest per-replicate sample for the bound pipelines.
pub const MIN_BOUNDS_ROWS: usize = 100;
/// Reference sample size for simulation grids.
pub const REFERENCE_N: usize = 100_000;
/// Points kept for the latent scatter of replicate 0.
pub const SCATTER_POINTS: usize = 500;

const ORACLE_STREAM: u64 = 0x6f72_6163;
const REFERENCE_STREAM: u64 = 0x7265_6673;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    /// Covariate design, bound estimators.
    BoundsSim { variant: BoundsVariant },
    /// Binary instrument design, TML means and ATE.
    IvAteSim { outcome: IvOutcome },
    /// Continuous instrument design, TML dose-response.
    DoseSim { outcome: IvOutcome },
    /// Binary instrument design: IV-VAE latent, then bound estimators on it.
    BoundsOnRepresentation { outcome: IvOutcome },
    /// A user table; replicates differ only in their fold seeds.
    UserCsv { path: PathBuf },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::BoundsSim { .. } => "bounds_sim",
            Experiment::IvAteSim { .. } => "iv_ate_sim",
            Experiment::DoseSim { .. } => "dose_sim",
            Experiment::BoundsOnRepresentation { .. } => "bounds_on_rep",
            Experiment::UserCsv { .. } => "user_csv",
        }
    }

    fn min_rows(&self) -> usize {
        match self {
            Experiment::BoundsSim { .. } => MIN_BOUNDS_ROWS,
            Experiment::IvAteSim { .. } | Experiment::DoseSim { .. } | Experiment::BoundsOnRepresentation { .. } => {
                MIN_TML_ROWS
            }
            Experiment::UserCsv { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub replications: usize,
    /// Per-replicate sample size; ignored for user tables.
    pub n: usize,
    pub base_seed: u64,
    /// Estimator flags, grid, folds, smoothing and VAE settings.
    pub config: RunConfig,
    /// Simulations only. Bounds: true conditional CDFs and propensity in
    /// place of fitted ones. Instrument designs: the true latent confounder
    /// in place of the learned representation.
    pub oracle: bool,
    /// Monte Carlo draws for oracle truths without a closed form.
    pub n_mc: usize,
    /// Worker threads for replicates.
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(experiment: Experiment, replications: usize, n: usize, base_seed: u64) -> Self {
        ExperimentSpec {
            experiment,
            replications,
            n,
            base_seed,
            config: RunConfig::default(),
            oracle: false,
            n_mc: 200_000,
            jobs: 1,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if self.n < self.experiment.min_rows() {
            return Err(Error::InvalidConfig(format!(
                "{} needs n >= {}, got {}",
                self.experiment.name(),
                self.experiment.min_rows(),
                self.n
            )));
        }
        if self.n_mc < 2 {
            return Err(Error::InvalidConfig("n_mc must be >= 2".into()));
        }
        if self.jobs == 0 {
            return Err(Error::InvalidConfig("jobs must be >= 1".into()));
        }
        if self.oracle && matches!(self.experiment, Experiment::UserCsv { .. }) {
            return Err(Error::InvalidConfig("oracle nuisances need a simulation".into()));
        }
        Ok(())
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        mix(self.base_seed, r as u64)
    }
}

/// One estimate from one replicate. `target` is `cdf` (`x1 = y1`,
/// `x2 = y0`), `mean` or `dose` (`x1 = a`), or `ate` (`x1 = a1`,
/// `x2 = a0`); unused coordinates are NaN. `truth` is NaN for user tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub estimator: String,
    pub target: String,
    pub x1: f64,
    pub x2: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub truth: f64,
    pub truth_mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimator: String,
    pub target: String,
    pub x1: f64,
    pub x2: f64,
    pub count: usize,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub mean_estimate: f64,
    /// `mean(est - truth)`
    pub bias: f64,
    /// sample standard deviation of the estimates
    pub se: f64,
    /// `bias^2 + se^2`
    pub mse: f64,
    /// `mean((est - truth)^2)`
    pub mean_sq_error: f64,
    /// share of replicates whose interval contains the truth
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub target: String,
    pub value: f64,
    pub mc_se: f64,
    pub method: OracleMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCorr {
    pub replicate: usize,
    pub rotation: usize,
    /// `corr(z_hat, Z_C)` on the rows the latent was evaluated on
    pub corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub seed: u64,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub thresholds: Vec<(f64, f64)>,
    pub doses: Vec<f64>,
    pub truths: Vec<TruthRecord>,
    pub records: Vec<ReplicateRecord>,
    pub aggregates: Vec<Aggregate>,
    pub latent_corr: Vec<LatentCorr>,
    /// `(Z_C, z_hat)` pairs from replicate 0
    pub latent_scatter: Vec<(f64, f64)>,
    pub failures: Vec<ReplicateFailure>,
    /// Requested estimators absent from the aggregates.
    pub missing_estimators: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    /// First replicate error, for the process exit code.
    pub fn first_failure(&self) -> Option<&ReplicateFailure> {
        self.failures.first()
    }
}

#[derive(Debug, Default)]
struct ReplicateOutput {
    records: Vec<ReplicateRecord>,
    latent_corr: Vec<LatentCorr>,
    scatter: Vec<(f64, f64)>,
}

/// Runs `f(0..n)` on up to `jobs` threads; results come back in index order.
pub fn run_pool<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                *slots[i].lock().expect("slot lock") = Some(v);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every index ran")).collect()
}

/// Shared, replicate-independent inputs: grids and truths.
struct Plan {
    thresholds: Vec<(f64, f64)>,
    grid_doses: Vec<f64>,
    contrasts: Vec<(f64, f64)>,
    truths: Vec<(OracleTarget, TruthRecord)>,
    user_data: Option<Dataset>,
}

impl Plan {
    fn truth(&self, target: &OracleTarget) -> (f64, f64) {
        self.truths
            .iter()
            .find(|(t, _)| t == target)
            .map(|(_, r)| (r.value, r.mc_se))
            .unwrap_or((f64::NAN, f64::NAN))
    }
}

/// `(y1, y0)` pairs at potential-outcome quantiles {0.25, 0.5, 0.75}^2.
fn quantile_pairs(y1: &[f64], y0: &[f64]) -> Vec<(f64, f64)> {
    let ps = [0.25, 0.5, 0.75];
    ps.iter().flat_map(|&p1| ps.iter().map(move |&p0| (quantile(y1, p1), quantile(y0, p0)))).collect()
}

fn reference_thresholds(exp: &Experiment, seed: u64) -> Result<Vec<(f64, f64)>> {
    match exp {
        Experiment::BoundsSim { variant } => {
            let s = simgen::gen_bounds_dgp(&BoundsDgpSpec { variant: *variant, n: REFERENCE_N, seed })?;
            Ok(quantile_pairs(&s.y1, &s.y0))
        }
        Experiment::BoundsOnRepresentation { outcome } => {
            let mut r = seeded(seed);
            let (mut y1, mut y0) = (Vec::with_capacity(REFERENCE_N), Vec::with_capacity(REFERENCE_N));
            for _ in 0..REFERENCE_N {
                let z: f64 = StandardNormal.sample(&mut r);
                let e: f64 = StandardNormal.sample(&mut r);
                y1.push(simgen::iv_outcome_mean(*outcome, 1.0, z) + IV_OUTCOME_SD * e);
                y0.push(simgen::iv_outcome_mean(*outcome, 0.0, z) + IV_OUTCOME_SD * e);
            }
            Ok(quantile_pairs(&y1, &y0))
        }
        _ => Ok(Vec::new()),
    }
}

fn dgp_for(exp: &Experiment, n: usize) -> Option<DgpSpec> {
    match *exp {
        Experiment::BoundsSim { variant } => Some(DgpSpec::Bounds(BoundsDgpSpec { variant, n, seed: 0 })),
        Experiment::IvAteSim { outcome } | Experiment::BoundsOnRepresentation { outcome } => {
            Some(DgpSpec::Iv(IvDgpSpec { outcome, treatment: IvTreatment::Binary, n, seed: 0 }))
        }
        Experiment::DoseSim { outcome } => {
            Some(DgpSpec::Iv(IvDgpSpec { outcome, treatment: IvTreatment::Continuous, n, seed: 0 }))
        }
        Experiment::UserCsv { .. } => None,
    }
}

/// Oracle target matching a bound estimator at `(y1, y0)`.
pub fn bound_truth_target(kind: BoundKind, y1: f64, y0: f64, t: f64) -> OracleTarget {
    match kind {
        BoundKind::MarginalL => OracleTarget::MarginalLower { y1, y0 },
        BoundKind::MarginalU => OracleTarget::MarginalUpper { y1, y0 },
        BoundKind::PluginL => OracleTarget::Lower { y1, y0 },
        BoundKind::PluginU | BoundKind::DrDirectU => OracleTarget::Upper { y1, y0 },
        BoundKind::DrSmoothU => OracleTarget::SmoothUpper { y1, y0, t },
        BoundKind::DrSmoothL => OracleTarget::SmoothLower { y1, y0, t },
    }
}

fn tml_truth_target(target: &Target) -> OracleTarget {
    match *target {
        Target::PotentialMean { a } | Target::Dose { a } => OracleTarget::PotentialMean { a },
        Target::Ate { a1, a0 } => OracleTarget::Ate { a1, a0 },
    }
}

fn make_plan(spec: &ExperimentSpec) -> Result<Plan> {
    let cfg = &spec.config;
    let ref_seed = mix(spec.base_seed, REFERENCE_STREAM);
    let oracle_seed = mix(spec.base_seed, ORACLE_STREAM);
    let mut plan = Plan { thresholds: Vec::new(), grid_doses: Vec::new(), contrasts: Vec::new(), truths: Vec::new(), user_data: None };
    let mut targets: Vec<OracleTarget> = Vec::new();
    match &spec.experiment {
        Experiment::BoundsSim { .. } | Experiment::BoundsOnRepresentation { .. } => {
            plan.thresholds = if cfg.grid.thresholds.is_empty() {
                reference_thresholds(&spec.experiment, ref_seed)?
            } else {
                cfg.grid.thresholds.clone()
            };
            let kinds = [
                BoundKind::MarginalL,
                BoundKind::MarginalU,
                BoundKind::PluginL,
                BoundKind::PluginU,
                BoundKind::DrSmoothU,
                BoundKind::DrSmoothL,
            ];
            for &(y1, y0) in &plan.thresholds {
                targets.extend(kinds.iter().map(|&k| bound_truth_target(k, y1, y0, cfg.smoothing_t)));
            }
        }
        Experiment::IvAteSim { .. } => {
            targets.extend([
                OracleTarget::PotentialMean { a: 0.0 },
                OracleTarget::PotentialMean { a: 1.0 },
                OracleTarget::Ate { a1: 1.0, a0: 0.0 },
            ]);
        }
        Experiment::DoseSim { outcome } => {
            plan.grid_doses = if cfg.grid.doses.is_empty() {
                let s = simgen::gen_iv_dgp(&IvDgpSpec {
                    outcome: *outcome,
                    treatment: IvTreatment::Continuous,
                    n: REFERENCE_N,
                    seed: ref_seed,
                })?;
                DoseGrid::default_for(&s.data)?.doses
            } else {
                cfg.grid.doses.clone()
            };
            plan.contrasts = vec![(1.0, 0.0)];
            targets.extend(plan.grid_doses.iter().map(|&a| OracleTarget::PotentialMean { a }));
            targets.extend(plan.contrasts.iter().map(|&(a1, a0)| OracleTarget::Ate { a1, a0 }));
        }
        Experiment::UserCsv { path } => {
            let data = Dataset::load_csv(path)?;
            if !data.has_instrument() && data.treatment_kind() == TreatmentKind::Binary {
                plan.thresholds = if cfg.grid.thresholds.is_empty() {
                    bounds::default_thresholds(&data)
                } else {
                    cfg.grid.thresholds.clone()
                };
            }
            if data.has_instrument() && data.treatment_kind() == TreatmentKind::Continuous {
                plan.grid_doses = if cfg.grid.doses.is_empty() {
                    DoseGrid::default_for(&data)?.doses
                } else {
                    cfg.grid.doses.clone()
                };
            }
            plan.user_data = Some(data);
        }
    }
    if let Some(dgp) = dgp_for(&spec.experiment, spec.n) {
        for t in targets {
            if plan.truths.iter().any(|(u, _)| *u == t) {
                continue;
            }
            // one seed for every target: common random numbers across bounds
            let o = simgen::oracle_truth(&dgp, &t, spec.n_mc, oracle_seed)?;
            plan.truths.push((t, TruthRecord { target: o.target, value: o.value, mc_se: o.mc_se, method: o.method }));
        }
    }
    Ok(plan)
}

fn bound_record(r: usize, seed: u64, e: &BoundEstimate, truth: (f64, f64)) -> ReplicateRecord {
    ReplicateRecord {
        replicate: r,
        seed,
        estimator: e.kind.name().to_string(),
        target: "cdf".into(),
        x1: e.y1,
        x2: e.y0,
        estimate: e.value,
        se: e.se,
        ci_lo: e.ci_lo,
        ci_hi: e.ci_hi,
        truth: truth.0,
        truth_mc_se: truth.1,
    }
}

fn tml_record(r: usize, seed: u64, e: &TmlEstimate, truth: (f64, f64)) -> ReplicateRecord {
    let (x1, x2) = e.target.doses();
    ReplicateRecord {
        replicate: r,
        seed,
        estimator: e.kind.name().to_string(),
        target: e.target.name().to_string(),
        x1,
        x2: x2.unwrap_or(f64::NAN),
        estimate: e.value,
        se: e.se,
        ci_lo: e.ci_lo,
        ci_hi: e.ci_hi,
        truth: truth.0,
        truth_mc_se: truth.1,
    }
}

/// True conditional CDFs and propensity of the covariate design at every
/// threshold pair, `rows[pair][row]`. Propensities are clipped to
/// `[clip_eps, 1 - clip_eps]`.
pub fn oracle_bound_rows(
    sample: &BoundsSample,
    variant: BoundsVariant,
    pairs: &[(f64, f64)],
    clip_eps: f64,
) -> Vec<Vec<PerPointNuisance>> {
    pairs
        .iter()
        .map(|&(y1, y0)| {
            sample
                .data
                .rows()
                .iter()
                .map(|o| PerPointNuisance {
                    theta0: simgen::bounds_conditional_cdf(variant, 0, &o.x, y0),
                    theta1: simgen::bounds_conditional_cdf(variant, 1, &o.x, y1),
                    pi1: simgen::bounds_propensity(&o.x).clamp(clip_eps, 1.0 - clip_eps),
                    arm: o.arm(),
                    below0: o.y <= y0,
                    below1: o.y <= y1,
                })
                .collect()
        })
        .collect()
}

fn latent_diagnostics(r: usize, z_c: &[f64], trace: &[RotationLatent], out: &mut ReplicateOutput) {
    for rl in trace {
        let zc: Vec<f64> = rl.rows.iter().map(|&i| z_c[i]).collect();
        let zh: Vec<f64> = rl.z.iter().map(|v| v[0]).collect();
        out.latent_corr.push(LatentCorr { replicate: r, rotation: rl.rotation, corr: pearson(&zh, &zc) });
        if r == 0 && rl.rotation == 0 {
            out.scatter = zc.iter().zip(&zh).take(SCATTER_POINTS).map(|(&a, &b)| (a, b)).collect();
        }
    }
}

fn bounds_records(
    r: usize,
    seed: u64,
    plan: &Plan,
    rows: &[Vec<PerPointNuisance>],
    spec: &ExperimentSpec,
) -> Result<Vec<ReplicateRecord>> {
    let t = spec.config.smoothing_t;
    let sel = BoundSelection::from(&spec.config.estimators);
    let mut out = Vec::new();
    for (p, &(y1, y0)) in plan.thresholds.iter().enumerate() {
        for e in bounds::estimate_pair(&rows[p], y1, y0, t, sel)? {
            out.push(bound_record(r, seed, &e, plan.truth(&bound_truth_target(e.kind, y1, y0, t))));
        }
    }
    Ok(out)
}

fn run_replicate(spec: &ExperimentSpec, plan: &Plan, r: usize) -> Result<ReplicateOutput> {
    let seed = spec.replicate_seed(r);
    let est_seed = mix(seed, 1);
    let cfg = &spec.config;
    let ncfg = NuisanceConfig::with_clip(cfg.clip_eps);
    let mut out = ReplicateOutput::default();
    match &spec.experiment {
        Experiment::BoundsSim { variant } => {
            let s = simgen::gen_bounds_dgp(&BoundsDgpSpec { variant: *variant, n: spec.n, seed })?;
            let rows = if spec.oracle {
                oracle_bound_rows(&s, *variant, &plan.thresholds, cfg.clip_eps)
            } else {
                bounds::cross_fit_rows(&s.data, &plan.thresholds, cfg.bounds_folds, est_seed, &ncfg)?
            };
            out.records = bounds_records(r, seed, plan, &rows, spec)?;
        }
        Experiment::IvAteSim { outcome } => {
            let s = simgen::gen_iv_dgp(&IvDgpSpec { outcome: *outcome, treatment: IvTreatment::Binary, n: spec.n, seed })?;
            let zc: Vec<Vec<f64>> = s.z_c.iter().map(|&z| vec![z]).collect();
            let rep = if spec.oracle { Representation::Oracle(&zc) } else { Representation::Learned };
            let (est, trace) = tml::run_tml_binary_traced(&s.data, cfg, est_seed, rep)?;
            latent_diagnostics(r, &s.z_c, &trace, &mut out);
            let mut all = est;
            if cfg.estimators.twosls {
                all.push(tml::twosls_baseline(&s.data, 1.0, 0.0)?);
            }
            out.records = all.iter().map(|e| tml_record(r, seed, e, plan.truth(&tml_truth_target(&e.target)))).collect();
        }
        Experiment::DoseSim { outcome } => {
            let s = simgen::gen_iv_dgp(&IvDgpSpec {
                outcome: *outcome,
                treatment: IvTreatment::Continuous,
                n: spec.n,
                seed,
            })?;
            let mut grid = DoseGrid::with_doses(&s.data, plan.grid_doses.clone())?;
            grid.contrasts = plan.contrasts.clone();
            let zc: Vec<Vec<f64>> = s.z_c.iter().map(|&z| vec![z]).collect();
            let rep = if spec.oracle { Representation::Oracle(&zc) } else { Representation::Learned };
            let (est, trace) = tml::run_tml_continuous_traced(&s.data, cfg, &grid, est_seed, rep)?;
            latent_diagnostics(r, &s.z_c, &trace, &mut out);
            let mut all = est;
            if cfg.estimators.twosls {
                for &(a1, a0) in &plan.contrasts {
                    all.push(tml::twosls_baseline(&s.data, a1, a0)?);
                }
            }
            out.records = all.iter().map(|e| tml_record(r, seed, e, plan.truth(&tml_truth_target(&e.target)))).collect();
        }
        Experiment::BoundsOnRepresentation { outcome } => {
            let s = simgen::gen_iv_dgp(&IvDgpSpec { outcome: *outcome, treatment: IvTreatment::Binary, n: spec.n, seed })?;
            let mut idx: Vec<usize> = (0..spec.n).collect();
            idx.shuffle(&mut seeded(mix(est_seed, 0)));
            let (rep_idx, rest) = idx.split_at(spec.n / 3);
            let mut rest = rest.to_vec();
            rest.sort_unstable();
            let eval = s.data.subset(&rest);
            let z: Vec<Vec<f64>> = if spec.oracle {
                rest.iter().map(|&i| vec![s.z_c[i]]).collect()
            } else {
                let (model, _) = ivvae::train(&s.data.subset(rep_idx), &cfg.vae, mix(est_seed, 1))?;
                model.encode(&eval)?
            };
            let trace = [RotationLatent { rotation: 0, rows: rest.clone(), z: z.clone() }];
            latent_diagnostics(r, &s.z_c, &trace, &mut out);
            let zdata = eval.with_covariates(&z)?;
            let rows = bounds::cross_fit_rows(&zdata, &plan.thresholds, cfg.bounds_folds, mix(est_seed, 2), &ncfg)?;
            out.records = bounds_records(r, seed, plan, &rows, spec)?;
        }
        Experiment::UserCsv { .. } => {
            let data = plan.user_data.as_ref().expect("user data loaded in plan");
            let nan = (f64::NAN, f64::NAN);
            match (data.has_instrument(), data.treatment_kind()) {
                (false, TreatmentKind::Binary) => {
                    if data.x_dim() == 0 {
                        return Err(Error::InvalidConfig("bounds need covariate columns x1..xd".into()));
                    }
                    let rows = bounds::cross_fit_rows(data, &plan.thresholds, cfg.bounds_folds, est_seed, &ncfg)?;
                    out.records = bounds_records(r, seed, plan, &rows, spec)?;
                }
                (true, kind) => {
                    let mut all = if kind == TreatmentKind::Binary {
                        tml::run_tml_binary(data, cfg, est_seed)?
                    } else {
                        let grid = DoseGrid::with_doses(data, plan.grid_doses.clone())?;
                        tml::run_tml_continuous(data, cfg, &grid, est_seed)?
                    };
                    if cfg.estimators.twosls {
                        all.push(tml::twosls_baseline(data, 1.0, 0.0)?);
                    }
                    out.records = all.iter().map(|e| tml_record(r, seed, e, nan)).collect();
                }
                (false, TreatmentKind::Continuous) => {
                    return Err(Error::InvalidConfig("a continuous treatment needs an instrument column s".into()))
                }
            }
        }
    }
    Ok(out)
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

/// Per estimator and target summaries, in order of first appearance.
pub fn aggregate(records: &[ReplicateRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(&str, &str, f64, f64)> = Vec::new();
    for rec in records {
        let k = (rec.estimator.as_str(), rec.target.as_str(), rec.x1, rec.x2);
        if !keys.iter().any(|q| q.0 == k.0 && q.1 == k.1 && same(q.2, k.2) && same(q.3, k.3)) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(estimator, target, x1, x2)| {
            let group: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.estimator == estimator && r.target == target && same(r.x1, x1) && same(r.x2, x2))
                .collect();
            let est: Vec<f64> = group.iter().map(|r| r.estimate).collect();
            let (truth, truth_mc_se) = (group[0].truth, group[0].truth_mc_se);
            let mean_estimate = mean(&est);
            let bias = mean_estimate - truth;
            let se = sd(&est);
            let sq: Vec<f64> = est.iter().map(|e| (e - truth).powi(2)).collect();
            let covered = group.iter().filter(|r| r.ci_lo <= truth && truth <= r.ci_hi).count();
            Aggregate {
                estimator: estimator.to_string(),
                target: target.to_string(),
                x1,
                x2,
                count: group.len(),
                truth,
                truth_mc_se,
                mean_estimate,
                bias,
                se,
                mse: bias * bias + se * se,
                mean_sq_error: mean(&sq),
                coverage: covered as f64 / group.len() as f64,
            }
        })
        .collect()
}

/// Estimator names the spec asks for, in reporting order.
fn expected_estimators(spec: &ExperimentSpec, plan: &Plan) -> Vec<&'static str> {
    let f = &spec.config.estimators;
    let bounds_names = || {
        let mut v = Vec::new();
        if f.marginal {
            v.extend([BoundKind::MarginalL.name(), BoundKind::MarginalU.name()]);
        }
        if f.plugin {
            v.extend([BoundKind::PluginL.name(), BoundKind::PluginU.name()]);
        }
        for (on, k) in [(f.dr_direct, BoundKind::DrDirectU), (f.dr_smooth_upper, BoundKind::DrSmoothU), (f.dr_smooth_lower, BoundKind::DrSmoothL)] {
            if on {
                v.push(k.name());
            }
        }
        v
    };
    let binary = || {
        [(f.outcome_regression, "or"), (f.ipw, "ipw"), (f.dr, "dr"), (f.twosls, "2sls")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect::<Vec<_>>()
    };
    let continuous = |with_2sls: bool| {
        [
            (f.outcome_regression, "or"),
            (f.gps_ipw, "gps_ipw"),
            (f.dr_density, "dr_density"),
            (f.dr_kernel, "dr_kernel"),
            (f.twosls && with_2sls, "2sls"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect::<Vec<_>>()
    };
    match &spec.experiment {
        Experiment::BoundsSim { .. } | Experiment::BoundsOnRepresentation { .. } => bounds_names(),
        Experiment::IvAteSim { .. } => binary(),
        Experiment::DoseSim { .. } => continuous(!plan.contrasts.is_empty()),
        Experiment::UserCsv { .. } => match plan.user_data.as_ref() {
            Some(d) if !d.has_instrument() => bounds_names(),
            Some(d) if d.treatment_kind() == TreatmentKind::Binary => binary(),
            Some(_) => continuous(true),
            None => Vec::new(),
        },
    }
}

/// Runs every replicate of `spec`. Replicate errors do not abort the run;
/// they are collected in `failures` with the replicate index attached.
/// Errors before any replicate starts (bad spec, unreadable table, oracle
/// failure) are returned directly.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let start = Instant::now();
    let plan = make_plan(spec)?;
    let results = run_pool(spec.replications, spec.jobs, |r| run_replicate(spec, &plan, r));
    let mut records = Vec::new();
    let mut latent_corr = Vec::new();
    let mut latent_scatter = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => {
                records.extend(o.records);
                latent_corr.extend(o.latent_corr);
                if r == 0 {
                    latent_scatter = o.scatter;
                }
            }
            Err(e) => {
                let e = Error::Replicate { replicate: r, source: Box::new(e) };
                failures.push(ReplicateFailure {
                    replicate: r,
                    seed: spec.replicate_seed(r),
                    exit_code: e.exit_code(),
                    error: e.to_string(),
                });
            }
        }
    }
    let aggregates = aggregate(&records);
    let missing_estimators = expected_estimators(spec, &plan)
        .into_iter()
        .filter(|n| !aggregates.iter().any(|a| a.estimator == *n))
        .map(String::from)
        .collect();
    Ok(ExperimentReport {
        spec: spec.clone(),
        thresholds: plan.thresholds.clone(),
        doses: plan.grid_doses.clone(),
        truths: plan.truths.into_iter().map(|(_, t)| t).collect(),
        records,
        aggregates,
        latent_corr,
        latent_scatter,
        failures,
        missing_estimators,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

pub const REPLICATE_CSV_HEADER: [&str; 12] =
    ["replicate", "seed", "estimator", "target", "x1", "x2", "estimate", "se", "ci_lo", "ci_hi", "truth", "truth_mc_se"];

pub const AGGREGATE_CSV_HEADER: [&str; 13] = [
    "estimator",
    "target",
    "x1",
    "x2",
    "count",
    "truth",
    "truth_mc_se",
    "mean_estimate",
    "bias",
    "se",
    "mse",
    "mean_sq_error",
    "coverage",
];

/// NaN is written as an empty field.
fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format_float(v)
    }
}

fn parse_cell(s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::IoFailure(format!("bad number `{s}`")))
}

pub fn write_replicates_csv<W: std::io::Write>(records: &[ReplicateRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPLICATE_CSV_HEADER)?;
    for r in records {
        out.write_record([
            r.replicate.to_string(),
            r.seed.to_string(),
            r.estimator.clone(),
            r.target.clone(),
            cell(r.x1),
            cell(r.x2),
            cell(r.estimate),
            cell(r.se),
            cell(r.ci_lo),
            cell(r.ci_hi),
            cell(r.truth),
            cell(r.truth_mc_se),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_replicates_csv<R: std::io::Read>(r: R) -> Result<Vec<ReplicateRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let int = |i: usize| -> Result<u64> { row[i].parse().map_err(|_| Error::IoFailure(format!("bad integer `{}`", &row[i]))) };
        out.push(ReplicateRecord {
            replicate: int(0)? as usize,
            seed: int(1)?,
            estimator: row[2].to_string(),
            target: row[3].to_string(),
            x1: parse_cell(&row[4])?,
            x2: parse_cell(&row[5])?,
            estimate: parse_cell(&row[6])?,
            se: parse_cell(&row[7])?,
            ci_lo: parse_cell(&row[8])?,
            ci_hi: parse_cell(&row[9])?,
            truth: parse_cell(&row[10])?,
            truth_mc_se: parse_cell(&row[11])?,
        });
    }
    Ok(out)
}

pub fn write_aggregates_csv<W: std::io::Write>(aggs: &[Aggregate], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(AGGREGATE_CSV_HEADER)?;
    for a in aggs {
        out.write_record([
            a.estimator.clone(),
            a.target.clone(),
            cell(a.x1),
            cell(a.x2),
            a.count.to_string(),
            cell(a.truth),
            cell(a.truth_mc_se),
            cell(a.mean_estimate),
            cell(a.bias),
            cell(a.se),
            cell(a.mse),
            cell(a.mean_sq_error),
            cell(a.coverage),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_aggregates_csv<R: std::io::Read>(r: R) -> Result<Vec<Aggregate>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| parse_cell(&row[i]);
        out.push(Aggregate {
            estimator: row[0].to_string(),
            target: row[1].to_string(),
            x1: f(2)?,
            x2: f(3)?,
            count: row[4].parse().map_err(|_| Error::IoFailure(format!("bad count `{}`", &row[4])))?,
            truth: f(5)?,
            truth_mc_se: f(6)?,
            mean_estimate: f(7)?,
            bias: f(8)?,
            se: f(9)?,
            mse: f(10)?,
            mean_sq_error: f(11)?,
            coverage: f(12)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub estimator: String,
    pub target: String,
    pub x1: Option<f64>,
    pub x2: Option<f64>,
    pub truth: Option<f64>,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseCurve {
    pub estimator: String,
    pub doses: Vec<f64>,
    pub truth: Vec<Option<f64>>,
    pub mean: Vec<f64>,
    /// 2.5% and 97.5% quantiles across replicates
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub label: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotBundle {
    pub experiment: String,
    pub boxplots: Vec<BoxStats>,
    pub dose_curves: Vec<DoseCurve>,
    pub width_reduction: Vec<Histogram>,
    pub latent_corr: Vec<LatentCorr>,
    pub latent_scatter: Vec<(f64, f64)>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn histogram(label: &str, values: &[f64], bins: usize) -> Histogram {
    if values.is_empty() || bins == 0 {
        return Histogram { label: label.into(), edges: Vec::new(), counts: Vec::new() };
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let w = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + w * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        counts[(((v - lo) / w) as usize).min(bins - 1)] += 1;
    }
    Histogram { label: label.into(), edges, counts }
}

fn width_reductions(records: &[ReplicateRecord]) -> Vec<Histogram> {
    let find = |rep: usize, x1: f64, x2: f64, name: &str| {
        records
            .iter()
            .find(|r| r.replicate == rep && r.estimator == name && same(r.x1, x1) && same(r.x2, x2))
            .map(|r| r.estimate)
    };
    let mut out = Vec::new();
    for (label, lo, hi) in [("dr_smooth", "dr_smooth_l", "dr_smooth_u"), ("plugin", "plugin_l", "plugin_u")] {
        let values: Vec<f64> = records
            .iter()
            .filter(|r| r.estimator == BoundKind::MarginalU.name())
            .filter_map(|r| {
                let ml = find(r.replicate, r.x1, r.x2, BoundKind::MarginalL.name())?;
                let (l, u) = (find(r.replicate, r.x1, r.x2, lo)?, find(r.replicate, r.x1, r.x2, hi)?);
                Some(bounds::width_reduction((ml, r.estimate), (l, u)))
            })
            .collect();
        if !values.is_empty() {
            out.push(histogram(label, &values, 20));
        }
    }
    out
}

fn dose_curves(report: &ExperimentReport) -> Vec<DoseCurve> {
    let mut names: Vec<&str> = Vec::new();
    for r in report.records.iter().filter(|r| r.target == "dose") {
        if !names.contains(&r.estimator.as_str()) {
            names.push(&r.estimator);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut doses: Vec<f64> = Vec::new();
            for r in report.records.iter().filter(|r| r.target == "dose" && r.estimator == name) {
                if !doses.iter().any(|d| same(*d, r.x1)) {
                    doses.push(r.x1);
                }
            }
            let mut c = DoseCurve { estimator: name.into(), doses: doses.clone(), truth: Vec::new(), mean: Vec::new(), lo: Vec::new(), hi: Vec::new() };
            for d in doses {
                let grp: Vec<&ReplicateRecord> =
                    report.records.iter().filter(|r| r.target == "dose" && r.estimator == name && same(r.x1, d)).collect();
                let v: Vec<f64> = grp.iter().map(|r| r.estimate).collect();
                c.truth.push(finite(grp[0].truth));
                c.mean.push(mean(&v));
                c.lo.push(quantile(&v, 0.025));
                c.hi.push(quantile(&v, 0.975));
            }
            c
        })
        .collect()
}

pub fn plot_bundle(report: &ExperimentReport) -> PlotBundle {
    let boxplots = report
        .aggregates
        .iter()
        .map(|a| {
            let v: Vec<f64> = report
                .records
                .iter()
                .filter(|r| r.estimator == a.estimator && r.target == a.target && same(r.x1, a.x1) && same(r.x2, a.x2))
                .map(|r| r.estimate)
                .collect();
            BoxStats {
                estimator: a.estimator.clone(),
                target: a.target.clone(),
                x1: finite(a.x1),
                x2: finite(a.x2),
                truth: finite(a.truth),
                min: quantile(&v, 0.0),
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: quantile(&v, 1.0),
            }
        })
        .collect();
    PlotBundle {
        experiment: report.spec.experiment.name().into(),
        boxplots,
        dose_curves: dose_curves(report),
        width_reduction: width_reductions(&report.records),
        latent_corr: report.latent_corr.clone(),
        latent_scatter: report.latent_scatter.clone(),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    spec: &'a ExperimentSpec,
    replicate_seeds: Vec<u64>,
    thresholds: &'a [(f64, f64)],
    doses: &'a [f64],
    truths: &'a [TruthRecord],
    failures: &'a [ReplicateFailure],
    missing_estimators: &'a [String],
    files: Vec<&'static str>,
    wall_clock_seconds: f64,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
    Ok(p)
}

/// Writes the report files into `dir` (created if needed) and returns
/// their paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::IoFailure(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    let mut buf = Vec::new();
    write_replicates_csv(&report.records, &mut buf)?;
    files.push(write_file(dir, "replicates.csv", &buf)?);
    buf.clear();
    write_aggregates_csv(&report.aggregates, &mut buf)?;
    files.push(write_file(dir, "aggregates.csv", &buf)?);
    files.push(write_file(dir, "plots.json", serde_json::to_string_pretty(&plot_bundle(report))?.as_bytes())?);
    let mut names = vec!["replicates.csv", "aggregates.csv", "plots.json", "manifest.json"];
    if !report.failures.is_empty() {
        names.push("failures.json");
        files.push(write_file(dir, "failures.json", serde_json::to_string_pretty(&report.failures)?.as_bytes())?);
    }
    let manifest = Manifest {
        tool: "cfdist",
        version: env!("CARGO_PKG_VERSION"),
        spec: &report.spec,
        replicate_seeds: (0..report.spec.replications).map(|r| report.spec.replicate_seed(r)).collect(),
        thresholds: &report.thresholds,
        doses: &report.doses,
        truths: &report.truths,
        failures: &report.failures,
        missing_estimators: &report.missing_estimators,
        files: names,
        wall_clock_seconds: report.wall_clock_seconds,
    };
    files.push(write_file(dir, "manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?);
    Ok(files)
}
