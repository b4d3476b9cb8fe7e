//! Triple cross-fitting: rotate folds through representation learning,
//! nuisance fitting and evaluation, then pool rotations.
//!
//! Binary treatments get outcome-regression, IPW and AIPW estimates of
//! `E[Y(0)]`, `E[Y(1)]` and the ATE. Continuous treatments get dose-response
//! curves from outcome regression, GPS-weighted IPW, a density-ratio DR
//! estimator and a kernel-localised DR estimator. Two-stage least squares
//! is the linear baseline.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{format_float, make_folds, Dataset, EstimatorFlags, FoldMode, FoldRole, RunConfig, TreatmentKind};
use crate::error::{Error, Result};
use crate::ivvae;
use crate::nuisance::{
    fit_gps, fit_outcome_mean, fit_propensity, silverman_bandwidth, GpsModel, NuisanceConfig, OutcomeMeanModel,
    PropensityModel,
};
use crate::rng::mix;
use crate::stats::{mean, median, norm_pdf, quantile, sd, ScoreSummary, Z_975};

/// Minimum rows for a triple cross-fitting run.
pub const MIN_TML_ROWS: usize = 600;
/// Kernel support checked around each dose, in bandwidths.
pub const KERNEL_SUPPORT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Target {
    /// `E[Y(a)]` for a binary arm
    PotentialMean { a: f64 },
    /// `E[Y(a1)] - E[Y(a0)]`
    Ate { a1: f64, a0: f64 },
    /// One point of the dose-response curve
    Dose { a: f64 },
}

impl Target {
    pub fn name(&self) -> &'static str {
        match self {
            Target::PotentialMean { .. } => "mean",
            Target::Ate { .. } => "ate",
            Target::Dose { .. } => "dose",
        }
    }

    /// `(dose, reference dose)` for the CSV `dose` and `dose0` columns.
    pub fn doses(&self) -> (f64, Option<f64>) {
        match *self {
            Target::PotentialMean { a } | Target::Dose { a } => (a, None),
            Target::Ate { a1, a0 } => (a1, Some(a0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmlKind {
    Or,
    Ipw,
    Dr,
    GpsIpw,
    DrDensity,
    DrKernel,
    TwoSls,
}

impl TmlKind {
    pub fn name(&self) -> &'static str {
        match self {
            TmlKind::Or => "or",
            TmlKind::Ipw => "ipw",
            TmlKind::Dr => "dr",
            TmlKind::GpsIpw => "gps_ipw",
            TmlKind::DrDensity => "dr_density",
            TmlKind::DrKernel => "dr_kernel",
            TmlKind::TwoSls => "2sls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationValue {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmlEstimate {
    pub target: Target,
    pub kind: TmlKind,
    pub value: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub per_rotation: Vec<RotationValue>,
    /// Split seed; `None` after aggregation over splits.
    pub split: Option<u64>,
}

impl TmlEstimate {
    fn new(target: Target, kind: TmlKind, value: f64, se: f64) -> Self {
        TmlEstimate {
            target,
            kind,
            value,
            se,
            ci_lo: value - Z_975 * se,
            ci_hi: value + Z_975 * se,
            per_rotation: Vec::new(),
            split: None,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

/// Pools per-rotation summaries: mean of values, `se = sqrt(sum se_r^2) / R`
/// (evaluation folds are disjoint).
fn pool(target: Target, kind: TmlKind, rots: Vec<RotationValue>, split: u64) -> TmlEstimate {
    let r = rots.len() as f64;
    let value = rots.iter().map(|v| v.value).sum::<f64>() / r;
    let se = rots.iter().map(|v| v.se * v.se).sum::<f64>().sqrt() / r;
    let mut e = TmlEstimate::new(target, kind, value, se);
    e.per_rotation = rots;
    e.split = Some(split);
    e
}

/// Evaluation grid for dose-response curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    pub doses: Vec<f64>,
    /// Kernel bandwidth for GPS-IPW and DR-kernel.
    pub bandwidth: f64,
    /// Dose contrasts `(a1, a0)` reported as ATE targets.
    #[serde(default)]
    pub contrasts: Vec<(f64, f64)>,
}

impl DoseGrid {
    /// 25 equally spaced doses between the 5th and 95th dose percentiles;
    /// Silverman bandwidth at the evaluation-fold size (`n / 3`).
    pub fn default_for(data: &Dataset) -> Result<DoseGrid> {
        let a = data.treatments();
        let (lo, hi) = (quantile(&a, 0.05), quantile(&a, 0.95));
        let doses = (0..25).map(|i| lo + (hi - lo) * i as f64 / 24.0).collect();
        DoseGrid::with_doses(data, doses)
    }

    pub fn with_doses(data: &Dataset, doses: Vec<f64>) -> Result<DoseGrid> {
        let a = data.treatments();
        let s = sd(&a);
        if !(s > 0.0) {
            return Err(Error::ZeroVariance("treatment".into()));
        }
        Ok(DoseGrid { doses, bandwidth: silverman_bandwidth(s, (data.n() / 3).max(1)), contrasts: Vec::new() })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidConfig("dose bandwidth must be positive".into()));
        }
        if self.doses.iter().any(|d| !d.is_finite()) || self.doses.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("doses must be finite and strictly increasing".into()));
        }
        Ok(())
    }
}

/// Where the latent confounder features come from.
#[derive(Debug, Clone, Copy)]
pub enum Representation<'a> {
    /// Train the IV-VAE on the representation folds of each rotation.
    Learned,
    /// Use the given per-row features in every rotation.
    Oracle(&'a [Vec<f64>]),
}

fn check_common(data: &Dataset, cfg: &RunConfig, kind: TreatmentKind) -> Result<()> {
    cfg.validate()?;
    if !data.has_instrument() {
        return Err(Error::MissingInstrument);
    }
    if data.treatment_kind() != kind {
        return Err(Error::InvalidConfig(format!("pipeline expects a {kind:?} treatment")));
    }
    if data.n() < MIN_TML_ROWS {
        return Err(Error::InvalidConfig(format!("triple cross-fitting needs at least {MIN_TML_ROWS} rows, got {}", data.n())));
    }
    Ok(())
}

/// Latent features for every row in one rotation.
fn latent_features(data: &Dataset, rep_rows: &[usize], cfg: &RunConfig, rep: Representation, seed: u64) -> Result<Vec<Vec<f64>>> {
    match rep {
        Representation::Oracle(z) => {
            if z.len() != data.n() {
                return Err(Error::LengthMismatch(z.len(), data.n()));
            }
            Ok(z.to_vec())
        }
        Representation::Learned => {
            let (model, _) = ivvae::train(&data.subset(rep_rows), &cfg.vae, seed)?;
            model.encode(data)
        }
    }
}

/// Per-row summands of the binary estimators for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySummands {
    pub or: Vec<f64>,
    pub ipw: Vec<f64>,
    pub dr: Vec<f64>,
}

/// Summands for arm `arm` from outcome predictions `m` and clipped
/// propensities `pi` (probability of the given arm) on evaluation rows.
pub fn binary_summands(arms: &[u8], ys: &[f64], m: &[f64], pi: &[f64], arm: u8) -> BinarySummands {
    let n = ys.len();
    let mut out = BinarySummands { or: Vec::with_capacity(n), ipw: Vec::with_capacity(n), dr: Vec::with_capacity(n) };
    for i in 0..n {
        let ind = f64::from(u8::from(arms[i] == arm));
        out.or.push(m[i]);
        out.ipw.push(ind * ys[i] / pi[i]);
        out.dr.push(m[i] + ind / pi[i] * (ys[i] - m[i]));
    }
    out
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn rot(scores: &[f64]) -> RotationValue {
    let s = ScoreSummary::from_scores(scores);
    RotationValue { value: s.value, se: s.se }
}

/// Nuisance fits on the nuisance folds for a binary rotation.
struct BinaryNuisance {
    outcome: OutcomeMeanModel,
    propensity: PropensityModel,
}

fn binary_kinds(flags: &EstimatorFlags) -> Vec<TmlKind> {
    let mut k = Vec::new();
    if flags.outcome_regression {
        k.push(TmlKind::Or);
    }
    if flags.ipw {
        k.push(TmlKind::Ipw);
    }
    if flags.dr {
        k.push(TmlKind::Dr);
    }
    k
}

/// Triple cross-fitted OR, IPW and DR estimates of `E[Y(0)]`, `E[Y(1)]` and
/// the ATE, with the IV-VAE representation.
pub fn run_tml_binary(data: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Vec<TmlEstimate>> {
    run_tml_binary_with(data, cfg, seed, Representation::Learned)
}

pub fn run_tml_binary_with(data: &Dataset, cfg: &RunConfig, seed: u64, rep: Representation) -> Result<Vec<TmlEstimate>> {
    Ok(run_tml_binary_traced(data, cfg, seed, rep)?.0)
}

/// Latent features of one rotation's evaluation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationLatent {
    pub rotation: usize,
    pub rows: Vec<usize>,
    pub z: Vec<Vec<f64>>,
}

fn latent_trace(rotation: usize, eval_idx: &[usize], z: &[Vec<f64>]) -> RotationLatent {
    RotationLatent { rotation, rows: eval_idx.to_vec(), z: eval_idx.iter().map(|&i| z[i].clone()).collect() }
}

/// [`run_tml_binary_with`] that also returns the evaluation-fold latents.
pub fn run_tml_binary_traced(
    data: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    rep: Representation,
) -> Result<(Vec<TmlEstimate>, Vec<RotationLatent>)> {
    check_common(data, cfg, TreatmentKind::Binary)?;
    for arm in [0u8, 1] {
        if !data.rows().iter().any(|r| r.arm() == arm) {
            return Err(Error::ArmMissing(arm));
        }
    }
    let plan = make_folds(data.n(), cfg.k_folds, FoldMode::Triple, mix(seed, 0))?;
    let ncfg = NuisanceConfig::with_clip(cfg.clip_eps);
    let kinds = binary_kinds(&cfg.estimators);
    let targets = [
        Target::PotentialMean { a: 0.0 },
        Target::PotentialMean { a: 1.0 },
        Target::Ate { a1: 1.0, a0: 0.0 },
    ];
    // rots[target][kind]
    let mut rots = vec![vec![Vec::new(); kinds.len()]; targets.len()];
    let mut trace = Vec::new();
    for r in 0..plan.n_rotations() {
        let rep_rows = plan.rows_with_role(r, FoldRole::Representation);
        let z = latent_features(data, &rep_rows, cfg, rep, mix(seed, 100 + r as u64))?;
        let zdata = data.with_covariates(&z)?;
        let train = zdata.subset(&plan.rows_with_role(r, FoldRole::Nuisance));
        let nu = BinaryNuisance { outcome: fit_outcome_mean(&train, &ncfg)?, propensity: fit_propensity(&train, &ncfg)? };
        let eval_idx = plan.rows_with_role(r, FoldRole::Evaluation);
        trace.push(latent_trace(r, &eval_idx, &z));
        let arms: Vec<u8> = eval_idx.iter().map(|&i| data.rows()[i].arm()).collect();
        let ys: Vec<f64> = eval_idx.iter().map(|&i| data.rows()[i].y).collect();
        let per_arm: Vec<BinarySummands> = [0u8, 1]
            .iter()
            .map(|&arm| {
                let m: Vec<f64> = eval_idx.iter().map(|&i| nu.outcome.predict(f64::from(arm), &z[i])).collect();
                let pi: Vec<f64> = eval_idx.iter().map(|&i| nu.propensity.predict(arm, &z[i])).collect();
                binary_summands(&arms, &ys, &m, &pi, arm)
            })
            .collect();
        for (ki, kind) in kinds.iter().enumerate() {
            let pick = |s: &BinarySummands| -> Vec<f64> {
                match kind {
                    TmlKind::Or => s.or.clone(),
                    TmlKind::Ipw => s.ipw.clone(),
                    _ => s.dr.clone(),
                }
            };
            let (s0, s1) = (pick(&per_arm[0]), pick(&per_arm[1]));
            rots[0][ki].push(rot(&s0));
            rots[1][ki].push(rot(&s1));
            rots[2][ki].push(rot(&diff(&s1, &s0)));
        }
    }
    let mut out = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        for (ki, kind) in kinds.iter().enumerate() {
            out.push(pool(*target, *kind, std::mem::take(&mut rots[t][ki]), seed));
        }
    }
    Ok((out, trace))
}

/// Gaussian kernel `K_h(u) = phi(u / h) / h`.
pub fn kernel(u: f64, h: f64) -> f64 {
    norm_pdf(u / h) / h
}

/// Normalised kernel weights `w_i(a) = K_h(A_i - a) / sum_j K_h(A_j - a)`.
/// Fails when no dose lies within [`KERNEL_SUPPORT`] bandwidths of `a`.
pub fn kernel_weights(doses: &[f64], a: f64, h: f64) -> Result<Vec<f64>> {
    if !doses.iter().any(|&d| (d - a).abs() <= KERNEL_SUPPORT * h) {
        return Err(Error::ZeroKernelMass(a));
    }
    let k: Vec<f64> = doses.iter().map(|&d| kernel(d - a, h)).collect();
    let total: f64 = k.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroKernelMass(a));
    }
    Ok(k.into_iter().map(|v| v / total).collect())
}

/// Inputs for the continuous estimators on one evaluation set.
pub struct ContinuousEval<'a> {
    pub doses: &'a [f64],
    pub ys: &'a [f64],
    /// `m(a, z_i)` as a function of the dose, per row
    pub m: &'a dyn Fn(usize, f64) -> f64,
    /// `r(a | z_i)` (trimmed), per row
    pub r: &'a dyn Fn(usize, f64) -> f64,
    pub bandwidth: f64,
    pub clip_eps: f64,
}

/// Per-row summands of every continuous estimator at dose `a`. The GPS-IPW
/// entry is the linearised (ratio) influence term plus the point value.
pub fn continuous_summands(ev: &ContinuousEval, a: f64) -> Result<[Vec<f64>; 4]> {
    let n = ev.ys.len();
    let w = kernel_weights(ev.doses, a, ev.bandwidth)?;
    let nf = n as f64;
    let max_ratio = 1.0 / ev.clip_eps;
    let mut or = Vec::with_capacity(n);
    let mut dens = Vec::with_capacity(n);
    let mut kern = Vec::with_capacity(n);
    let mut kr = Vec::with_capacity(n);
    for i in 0..n {
        let ai = ev.doses[i];
        let m_a = (ev.m)(i, a);
        let resid = ev.ys[i] - (ev.m)(i, ai);
        let r_obs = (ev.r)(i, ai);
        or.push(m_a);
        let ratio = ((ev.r)(i, a) / r_obs).min(max_ratio);
        dens.push(m_a + ratio * resid);
        kern.push(m_a + nf * w[i] * resid);
        kr.push(kernel(ai - a, ev.bandwidth) / r_obs);
    }
    let denom: f64 = kr.iter().sum::<f64>() / nf;
    let point = (0..n).map(|i| kr[i] * ev.ys[i]).sum::<f64>() / nf / denom;
    let gps: Vec<f64> = (0..n).map(|i| point + kr[i] * (ev.ys[i] - point) / denom).collect();
    Ok([or, gps, dens, kern])
}

fn continuous_kinds(flags: &EstimatorFlags) -> Vec<(usize, TmlKind)> {
    let mut k = Vec::new();
    if flags.outcome_regression {
        k.push((0, TmlKind::Or));
    }
    if flags.gps_ipw {
        k.push((1, TmlKind::GpsIpw));
    }
    if flags.dr_density {
        k.push((2, TmlKind::DrDensity));
    }
    if flags.dr_kernel {
        k.push((3, TmlKind::DrKernel));
    }
    k
}

/// Triple cross-fitted dose-response estimates over `grid`, plus ATE
/// contrasts listed in `grid.contrasts`.
pub fn run_tml_continuous(data: &Dataset, cfg: &RunConfig, grid: &DoseGrid, seed: u64) -> Result<Vec<TmlEstimate>> {
    run_tml_continuous_with(data, cfg, grid, seed, Representation::Learned)
}

pub fn run_tml_continuous_with(
    data: &Dataset,
    cfg: &RunConfig,
    grid: &DoseGrid,
    seed: u64,
    rep: Representation,
) -> Result<Vec<TmlEstimate>> {
    Ok(run_tml_continuous_traced(data, cfg, grid, seed, rep)?.0)
}

/// [`run_tml_continuous_with`] that also returns the evaluation-fold latents.
pub fn run_tml_continuous_traced(
    data: &Dataset,
    cfg: &RunConfig,
    grid: &DoseGrid,
    seed: u64,
    rep: Representation,
) -> Result<(Vec<TmlEstimate>, Vec<RotationLatent>)> {
    check_common(data, cfg, TreatmentKind::Continuous)?;
    grid.validate()?;
    let plan = make_folds(data.n(), cfg.k_folds, FoldMode::Triple, mix(seed, 0))?;
    let ncfg = NuisanceConfig::with_clip(cfg.clip_eps);
    let kinds = continuous_kinds(&cfg.estimators);
    let mut targets: Vec<Target> = grid.doses.iter().map(|&a| Target::Dose { a }).collect();
    targets.extend(grid.contrasts.iter().map(|&(a1, a0)| Target::Ate { a1, a0 }));
    let mut rots = vec![vec![Vec::new(); kinds.len()]; targets.len()];
    let mut trace = Vec::new();
    for r in 0..plan.n_rotations() {
        let rep_rows = plan.rows_with_role(r, FoldRole::Representation);
        let z = latent_features(data, &rep_rows, cfg, rep, mix(seed, 100 + r as u64))?;
        let zdata = data.with_covariates(&z)?;
        let train = zdata.subset(&plan.rows_with_role(r, FoldRole::Nuisance));
        let outcome = fit_outcome_mean(&train, &ncfg)?;
        let gps: GpsModel = fit_gps(&train, &ncfg)?;
        let eval_idx = plan.rows_with_role(r, FoldRole::Evaluation);
        trace.push(latent_trace(r, &eval_idx, &z));
        let doses: Vec<f64> = eval_idx.iter().map(|&i| data.rows()[i].a).collect();
        let ys: Vec<f64> = eval_idx.iter().map(|&i| data.rows()[i].y).collect();
        let zs: Vec<&Vec<f64>> = eval_idx.iter().map(|&i| &z[i]).collect();
        let m = |i: usize, a: f64| outcome.predict(a, zs[i]);
        let rr = |i: usize, a: f64| gps.density(a, zs[i]);
        let ev = ContinuousEval { doses: &doses, ys: &ys, m: &m, r: &rr, bandwidth: grid.bandwidth, clip_eps: cfg.clip_eps };
        for (t, target) in targets.iter().enumerate() {
            let s = match *target {
                Target::Dose { a } | Target::PotentialMean { a } => continuous_summands(&ev, a)?,
                Target::Ate { a1, a0 } => {
                    let (s1, s0) = (continuous_summands(&ev, a1)?, continuous_summands(&ev, a0)?);
                    [0, 1, 2, 3].map(|k| diff(&s1[k], &s0[k]))
                }
            };
            for (ki, (slot, _)) in kinds.iter().enumerate() {
                rots[t][ki].push(rot(&s[*slot]));
            }
        }
    }
    let mut out = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        for (ki, (_, kind)) in kinds.iter().enumerate() {
            out.push(pool(*target, *kind, std::mem::take(&mut rots[t][ki]), seed));
        }
    }
    Ok((out, trace))
}

/// Just-identified IV slope with a heteroskedasticity-robust standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSls {
    pub beta: f64,
    pub se: f64,
}

pub fn twosls(data: &Dataset) -> Result<TwoSls> {
    let s = data.instruments()?;
    let a = data.treatments();
    let y = data.ys();
    let n = s.len();
    let (sm, am, ym) = (mean(&s), mean(&a), mean(&y));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        num += (s[i] - sm) * (y[i] - ym);
        den += (s[i] - sm) * (a[i] - am);
    }
    let scale = 1e-10 * n as f64 * sd(&s) * sd(&a);
    if !(den.abs() >= scale) || den == 0.0 {
        return Err(Error::WeakInstrument(den));
    }
    let beta = num / den;
    let mut meat = 0.0;
    for i in 0..n {
        let u = (y[i] - ym) - beta * (a[i] - am);
        meat += (s[i] - sm).powi(2) * u * u;
    }
    Ok(TwoSls { beta, se: meat.sqrt() / den.abs() })
}

/// 2SLS reported as the contrast `beta * (a1 - a0)`.
pub fn twosls_baseline(data: &Dataset, a1: f64, a0: f64) -> Result<TmlEstimate> {
    let fit = twosls(data)?;
    let d = a1 - a0;
    Ok(TmlEstimate::new(Target::Ate { a1, a0 }, TmlKind::TwoSls, fit.beta * d, fit.se * d.abs()))
}

/// Combines estimates of one target over independent split seeds: median
/// point estimate and `median_b[se_b^2 + (value_b - point)^2]` variance.
pub fn aggregate_splits(estimates: &[TmlEstimate]) -> Result<TmlEstimate> {
    let first = estimates.first().ok_or_else(|| Error::InvalidConfig("aggregation needs at least one split".into()))?;
    if estimates.iter().any(|e| e.target != first.target || e.kind != first.kind) {
        return Err(Error::MixedTargets);
    }
    if estimates.len() == 1 {
        return Ok(first.clone());
    }
    let values: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    let point = median(&values);
    let var = median(&estimates.iter().map(|e| e.se * e.se + (e.value - point).powi(2)).collect::<Vec<_>>());
    Ok(TmlEstimate::new(first.target, first.kind, point, var.sqrt()))
}

/// Runs `run` once per split seed `mix(base, b)` and aggregates position by
/// position; every split must report the same targets in the same order.
pub fn run_splits<F>(n_splits: usize, base_seed: u64, mut run: F) -> Result<Vec<TmlEstimate>>
where
    F: FnMut(u64) -> Result<Vec<TmlEstimate>>,
{
    if n_splits == 0 {
        return Err(Error::InvalidConfig("need at least one split".into()));
    }
    let splits: Vec<Vec<TmlEstimate>> = (0..n_splits).map(|b| run(mix(base_seed, b as u64))).collect::<Result<_>>()?;
    let width = splits[0].len();
    if splits.iter().any(|s| s.len() != width) {
        return Err(Error::MixedTargets);
    }
    (0..width)
        .map(|j| aggregate_splits(&splits.iter().map(|s| s[j].clone()).collect::<Vec<_>>()))
        .collect()
}

pub const TML_CSV_HEADER: [&str; 10] = ["split", "rotation", "estimator", "target", "dose", "dose0", "value", "se", "ci_lo", "ci_hi"];

/// Long-form CSV: one row per rotation, then a `pooled` row per estimate.
pub fn write_tml_csv<W: Write>(estimates: &[TmlEstimate], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TML_CSV_HEADER)?;
    for e in estimates {
        let split = e.split.map(|s| s.to_string()).unwrap_or_else(|| "aggregate".into());
        let (d, d0) = e.target.doses();
        let d0 = d0.map(format_float).unwrap_or_default();
        let mut row = |rotation: String, v: f64, se: f64| {
            out.write_record([
                split.clone(),
                rotation,
                e.kind.name().to_string(),
                e.target.name().to_string(),
                format_float(d),
                d0.clone(),
                format_float(v),
                format_float(se),
                format_float(v - Z_975 * se),
                format_float(v + Z_975 * se),
            ])
        };
        for (r, rv) in e.per_rotation.iter().enumerate() {
            row(r.to_string(), rv.value, rv.se)?;
        }
        row("pooled".into(), e.value, e.se)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::simgen::{gen_iv_dgp, IvDgpSpec, IvOutcome, IvTreatment};

    #[test]
    fn dr_summand_single_row() {
        let s = binary_summands(&[1], &[2.0], &[0.0], &[0.5], 1);
        assert_eq!(s.dr, vec![4.0]);
        assert_eq!(s.ipw, vec![4.0]);
        assert_eq!(s.or, vec![0.0]);
    }

    #[test]
    fn twosls_examples() {
        let rows = |v: &[(f64, f64, f64)]| {
            Dataset::from_rows(v.iter().map(|&(s, a, y)| Observation::new(y, a).with_s(s)).collect()).unwrap()
        };
        let eq = rows(&[(0.0, 0.0, 0.0), (0.5, 0.5, 0.5), (2.0, 2.0, 2.0), (3.0, 3.0, 3.0)]);
        assert!((twosls(&eq).unwrap().beta - 1.0).abs() < 1e-12);
        let two = rows(&[(0.0, 0.0, 0.0), (1.0, 2.0, 6.0)]);
        assert!((twosls(&two).unwrap().beta - 3.0).abs() < 1e-12);
        let weak = rows(&[(1.0, 0.0, 0.0), (1.0, 2.0, 6.0), (1.0, 3.0, 1.0)]);
        assert!(matches!(twosls(&weak), Err(Error::WeakInstrument(_))));
    }

    #[test]
    fn aggregate_examples() {
        let e = |v: f64, se: f64| TmlEstimate::new(Target::Ate { a1: 1.0, a0: 0.0 }, TmlKind::Dr, v, se);
        let single = aggregate_splits(&[e(1.5, 0.2)]).unwrap();
        assert_eq!((single.value, single.se), (1.5, 0.2));
        let same = aggregate_splits(&[e(2.0, 0.3), e(2.0, 0.3), e(2.0, 0.3)]).unwrap();
        assert_eq!(same.value, 2.0);
        assert!((same.se - 0.3).abs() < 1e-15);
        let mixed = TmlEstimate::new(Target::PotentialMean { a: 1.0 }, TmlKind::Dr, 1.0, 0.1);
        assert_eq!(aggregate_splits(&[e(1.0, 0.1), mixed]).unwrap_err(), Error::MixedTargets);
    }

    #[test]
    fn kernel_weights_normalise_and_detect_empty_support() {
        let d = [0.0, 0.1, 0.5, 2.0];
        let w = kernel_weights(&d, 0.3, 0.2).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(kernel_weights(&d, 10.0, 0.2).unwrap_err(), Error::ZeroKernelMass(10.0));
    }

    #[test]
    fn constant_outcome_gives_constant_curve() {
        let doses = [0.0, 0.2, 0.4, 0.9, 1.3];
        let ys = [3.0; 5];
        let m = |_: usize, _: f64| 3.0;
        let r = |_: usize, a: f64| 0.5 + 0.1 * a;
        let ev = ContinuousEval { doses: &doses, ys: &ys, m: &m, r: &r, bandwidth: 0.3, clip_eps: 0.01 };
        for a in [0.1, 0.5, 1.0] {
            for s in continuous_summands(&ev, a).unwrap() {
                assert!((mean(&s) - 3.0).abs() < 1e-12);
            }
        }
    }

    fn oracle_cfg() -> RunConfig {
        RunConfig::default()
    }

    #[test]
    fn oracle_binary_dr_close_to_or() {
        let s = gen_iv_dgp(&IvDgpSpec { outcome: IvOutcome::Linear, treatment: IvTreatment::Binary, n: 3000, seed: 4 }).unwrap();
        let z: Vec<Vec<f64>> = s.z_c.iter().map(|&v| vec![v]).collect();
        let est = run_tml_binary_with(&s.data, &oracle_cfg(), 1, Representation::Oracle(&z)).unwrap();
        assert_eq!(est.len(), 9);
        let get = |t: Target, k: TmlKind| est.iter().find(|e| e.target == t && e.kind == k).unwrap();
        let ate = Target::Ate { a1: 1.0, a0: 0.0 };
        let (dr, or) = (get(ate, TmlKind::Dr), get(ate, TmlKind::Or));
        assert!((dr.value - or.value).abs() <= 2.0 * dr.se, "{} {} {}", dr.value, or.value, dr.se);
        assert!((dr.value - 2.0).abs() < 0.3);
        assert_eq!(dr.per_rotation.len(), 3);
        assert!(dr.ci_lo <= dr.value && dr.value <= dr.ci_hi);
    }

    #[test]
    fn oracle_continuous_pipeline_runs() {
        let s = gen_iv_dgp(&IvDgpSpec { outcome: IvOutcome::Linear, treatment: IvTreatment::Continuous, n: 1800, seed: 5 }).unwrap();
        let z: Vec<Vec<f64>> = s.z_c.iter().map(|&v| vec![v]).collect();
        let mut grid = DoseGrid::with_doses(&s.data, vec![0.0, 0.5, 1.0]).unwrap();
        grid.contrasts.push((1.0, 0.0));
        let est = run_tml_continuous_with(&s.data, &oracle_cfg(), &grid, 2, Representation::Oracle(&z)).unwrap();
        assert_eq!(est.len(), 16);
        let or = est.iter().find(|e| e.kind == TmlKind::Or && e.target == Target::Dose { a: 0.5 }).unwrap();
        assert!((or.value - 2.0).abs() < 0.1, "{}", or.value);
        let ate = est.iter().find(|e| e.kind == TmlKind::DrKernel && e.target == Target::Ate { a1: 1.0, a0: 0.0 }).unwrap();
        assert!((ate.value - 2.0).abs() < 0.5, "{}", ate.value);
    }

    #[test]
    fn input_validation() {
        let s = gen_iv_dgp(&IvDgpSpec { outcome: IvOutcome::Linear, treatment: IvTreatment::Binary, n: 100, seed: 4 }).unwrap();
        assert!(matches!(run_tml_binary(&s.data, &oracle_cfg(), 0), Err(Error::InvalidConfig(_))));
        let no_s = Dataset::from_rows((0..700).map(|i| Observation::new(i as f64, f64::from(i % 2))).collect()).unwrap();
        assert_eq!(run_tml_binary(&no_s, &oracle_cfg(), 0).unwrap_err(), Error::MissingInstrument);
        let one_arm = Dataset::from_rows((0..700).map(|i| Observation::new(i as f64, 1.0).with_s(0.1 * i as f64)).collect()).unwrap();
        assert_eq!(run_tml_binary(&one_arm, &oracle_cfg(), 0).unwrap_err(), Error::ArmMissing(0));
    }

    #[test]
    fn csv_has_rotation_and_pooled_rows() {
        let mut e = TmlEstimate::new(Target::Dose { a: 0.5 }, TmlKind::DrKernel, 2.0, 0.1);
        e.per_rotation = vec![RotationValue { value: 1.9, se: 0.2 }; 3];
        e.split = Some(7);
        let mut buf = Vec::new();
        write_tml_csv(&[e], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().starts_with("7,pooled,dr_kernel,dose,0.5,,2.0,0.1,"));
    }
}
