//! Simulation designs with seeded generators and oracle truths.
//!
//! Two families:
//!
//! * the covariate design for distributional bounds, `X ~ N(0, I_2)` with a
//!   logistic treatment and Gaussian potential outcomes sharing one error;
//! * the instrument design, where a scalar confounder `Z_C` and an
//!   instrument `S` drive a binary or continuous treatment.

use std::io::Write;
use std::sync::OnceLock;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{logsumexp_min, softplus_max};
use crate::data::{format_float, Dataset, Observation};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{mean, norm_cdf, norm_pdf, sigmoid, variance_pop};

/// Noise scale of the treatment-assignment error in the covariate design.
pub const BOUNDS_TREATMENT_NOISE_SD: f64 = 0.1;
/// Noise scale of the first-stage error in the instrument design.
pub const IV_FIRST_STAGE_SD: f64 = 0.2;
/// Outcome noise scale in the instrument design.
pub const IV_OUTCOME_SD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsVariant {
    LinearScm,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsDgpSpec {
    pub variant: BoundsVariant,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IvOutcome {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IvTreatment {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvDgpSpec {
    pub outcome: IvOutcome,
    pub treatment: IvTreatment,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DgpSpec {
    Bounds(BoundsDgpSpec),
    Iv(IvDgpSpec),
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("simulation needs n >= 2, got {n}")));
    }
    Ok(())
}

/// Generated covariate-design data with both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsSample {
    pub data: Dataset,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Generated instrument-design data with the latent variables.
#[derive(Debug, Clone, PartialEq)]
pub struct IvSample {
    pub data: Dataset,
    pub z_c: Vec<f64>,
    pub z_s: Vec<f64>,
}

/// `E[Y(arm) | X = x]` in the covariate design.
pub fn bounds_mu(variant: BoundsVariant, arm: u8, x: &[f64]) -> f64 {
    match (variant, arm) {
        (BoundsVariant::LinearScm, 0) => x[0] + 0.5 * x[1],
        (BoundsVariant::LinearScm, _) => x[0] + 0.5 * x[1] + 1.0,
        (BoundsVariant::Nonlinear, 0) => (2.0 * x[0]).sin() + x[1] * x[1],
        (BoundsVariant::Nonlinear, _) => (2.0 * x[0]).cos() + x[1] * x[1] + 0.5,
    }
}

/// `P(Y(arm) <= y | X = x) = Phi(y - mu_arm(x))`.
pub fn bounds_conditional_cdf(variant: BoundsVariant, arm: u8, x: &[f64], y: f64) -> f64 {
    norm_cdf(y - bounds_mu(variant, arm, x))
}

fn bounds_index(x: &[f64]) -> f64 {
    0.5 * x[0] - 0.3 * x[1]
}

/// Composite Simpson nodes and weights for a standard normal expectation
/// over [-8, 8].
fn normal_quadrature() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let m = 320;
        let h = 16.0 / m as f64;
        (0..=m)
            .map(|k| {
                let z = -8.0 + k as f64 * h;
                let c = if k == 0 || k == m {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                (z, c * h / 3.0 * norm_pdf(z))
            })
            .collect()
    })
}

/// `E_eps[sigma(index + eps)]` for `eps ~ N(0, sd^2)`.
fn smoothed_logistic(index: f64, sd: f64) -> f64 {
    normal_quadrature().iter().map(|&(z, w)| w * sigmoid(index + sd * z)).sum()
}

/// True propensity `P(A = 1 | X = x)` in the covariate design.
pub fn bounds_propensity(x: &[f64]) -> f64 {
    smoothed_logistic(bounds_index(x), BOUNDS_TREATMENT_NOISE_SD)
}

pub fn gen_bounds_dgp(spec: &BoundsDgpSpec) -> Result<BoundsSample> {
    check_n(spec.n)?;
    let mut r = rng::seeded(spec.seed);
    let mut rows = Vec::with_capacity(spec.n);
    let mut y0s = Vec::with_capacity(spec.n);
    let mut y1s = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x1: f64 = StandardNormal.sample(&mut r);
        let x2: f64 = StandardNormal.sample(&mut r);
        let e_s: f64 = StandardNormal.sample(&mut r);
        let u: f64 = r.random();
        let e_y: f64 = StandardNormal.sample(&mut r);
        let x = [x1, x2];
        let a = u8::from(u < sigmoid(bounds_index(&x) + BOUNDS_TREATMENT_NOISE_SD * e_s));
        let y0 = bounds_mu(spec.variant, 0, &x) + e_y;
        let y1 = match spec.variant {
            // exact unit shift, row by row
            BoundsVariant::LinearScm => y0 + 1.0,
            BoundsVariant::Nonlinear => bounds_mu(spec.variant, 1, &x) + e_y,
        };
        let y = if a == 1 { y1 } else { y0 };
        rows.push(Observation::new(y, f64::from(a)).with_x(x.to_vec()));
        y0s.push(y0);
        y1s.push(y1);
    }
    Ok(BoundsSample { data: Dataset::from_rows(rows)?, y0: y0s, y1: y1s })
}

fn first_stage_mean(s: f64) -> f64 {
    0.5 * s + 0.1 * s.tanh() + 0.3 * sigmoid(2.0 * s)
}

/// `E[Y(a) | Z_C = z]` in the instrument design.
pub fn iv_outcome_mean(outcome: IvOutcome, a: f64, z: f64) -> f64 {
    match outcome {
        IvOutcome::Linear => 1.0 + 2.0 * a + 3.0 * z,
        IvOutcome::Nonlinear => {
            1.0 + 0.3 * a + 0.2 * (2.0 * a + 0.5).sin() + 0.3 * z + 2.0 * sigmoid(z) + 0.2 * a * z
        }
    }
}

/// `E[Y(a)]`; closed form since `E[Z_C] = 0` and `E[sigma(Z_C)] = 1/2`.
pub fn iv_dose_truth(outcome: IvOutcome, a: f64) -> f64 {
    match outcome {
        IvOutcome::Linear => 1.0 + 2.0 * a,
        IvOutcome::Nonlinear => 2.0 + 0.3 * a + 0.2 * (2.0 * a + 0.5).sin(),
    }
}

pub fn gen_iv_dgp(spec: &IvDgpSpec) -> Result<IvSample> {
    check_n(spec.n)?;
    let mut r = rng::seeded(spec.seed);
    let mut rows = Vec::with_capacity(spec.n);
    let mut zc = Vec::with_capacity(spec.n);
    let mut zs = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let s: f64 = r.random_range(-2.0..2.0);
        let z: f64 = StandardNormal.sample(&mut r);
        let e_s: f64 = StandardNormal.sample(&mut r);
        let u: f64 = r.random();
        let e_y: f64 = StandardNormal.sample(&mut r);
        let z_s = first_stage_mean(s) + 0.2 * z + IV_FIRST_STAGE_SD * e_s;
        let a = match spec.treatment {
            IvTreatment::Binary => f64::from(u8::from(u < sigmoid(z_s))),
            IvTreatment::Continuous => z_s,
        };
        let y = iv_outcome_mean(spec.outcome, a, z) + IV_OUTCOME_SD * e_y;
        rows.push(Observation::new(y, a).with_s(s));
        zc.push(z);
        zs.push(z_s);
    }
    Ok(IvSample { data: Dataset::from_rows(rows)?, z_c: zc, z_s: zs })
}

/// True `P(A = 1 | Z_C = z)` in the binary instrument design, integrating
/// over the instrument and first-stage noise. Tabulated once on a fine grid
/// and linearly interpolated.
pub fn iv_propensity(z: f64) -> f64 {
    const LO: f64 = -8.0;
    const HI: f64 = 8.0;
    const M: usize = 1600;
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        // Simpson over S ~ U(-2, 2)
        let ms = 200;
        let hs = 4.0 / ms as f64;
        let s_nodes: Vec<(f64, f64)> = (0..=ms)
            .map(|k| {
                let s = -2.0 + k as f64 * hs;
                let c = if k == 0 || k == ms {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                (first_stage_mean(s), c * hs / 3.0 / 4.0)
            })
            .collect();
        (0..=M)
            .map(|i| {
                let z = LO + (HI - LO) * i as f64 / M as f64;
                s_nodes.iter().map(|&(m, w)| w * smoothed_logistic(m + 0.2 * z, IV_FIRST_STAGE_SD)).sum()
            })
            .collect()
    });
    let pos = ((z.clamp(LO, HI) - LO) / (HI - LO) * M as f64).min(M as f64);
    let i = (pos.floor() as usize).min(M - 1);
    let f = pos - i as f64;
    table[i] * (1.0 - f) + table[i + 1] * f
}

/// Oracle targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleTarget {
    /// `F_{Y(arm)}(y)`
    MarginalCdf { arm: u8, y: f64 },
    /// `E[max(theta_1 + theta_0 - 1, 0)]`
    Lower { y1: f64, y0: f64 },
    /// `E[min(theta_1, theta_0)]`
    Upper { y1: f64, y0: f64 },
    /// `max(F_1 + F_0 - 1, 0)`
    MarginalLower { y1: f64, y0: f64 },
    /// `min(F_1, F_0)`
    MarginalUpper { y1: f64, y0: f64 },
    /// `E[g_t(theta_1, theta_0)]`, the log-sum-exp smoothed upper bound
    SmoothUpper { y1: f64, y0: f64, t: f64 },
    /// `E[softplus_t(theta_1 + theta_0 - 1)]`
    SmoothLower { y1: f64, y0: f64, t: f64 },
    /// `P(|theta_1 - theta_0| <= gap)`
    Margin { y1: f64, y0: f64, gap: f64 },
    /// `E[Y(a)]`
    PotentialMean { a: f64 },
    /// `E[Y(a1)] - E[Y(a0)]`
    Ate { a1: f64, a0: f64 },
}

impl OracleTarget {
    pub fn id(&self) -> String {
        let f = format_float;
        match *self {
            OracleTarget::MarginalCdf { arm, y } => format!("marginal_cdf(arm={arm},y={})", f(y)),
            OracleTarget::Lower { y1, y0 } => format!("lower({},{})", f(y1), f(y0)),
            OracleTarget::Upper { y1, y0 } => format!("upper({},{})", f(y1), f(y0)),
            OracleTarget::MarginalLower { y1, y0 } => format!("marginal_lower({},{})", f(y1), f(y0)),
            OracleTarget::MarginalUpper { y1, y0 } => format!("marginal_upper({},{})", f(y1), f(y0)),
            OracleTarget::SmoothUpper { y1, y0, t } => format!("smooth_upper({},{};t={})", f(y1), f(y0), f(t)),
            OracleTarget::SmoothLower { y1, y0, t } => format!("smooth_lower({},{};t={})", f(y1), f(y0), f(t)),
            OracleTarget::Margin { y1, y0, gap } => format!("margin({},{};gap={})", f(y1), f(y0), f(gap)),
            OracleTarget::PotentialMean { a } => format!("potential_mean({})", f(a)),
            OracleTarget::Ate { a1, a0 } => format!("ate({},{})", f(a1), f(a0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OracleMethod {
    Analytic,
    MonteCarlo { n_mc: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub target: String,
    pub value: f64,
    pub mc_se: f64,
    pub method: OracleMethod,
}

impl OracleTruth {
    fn analytic(target: &OracleTarget, value: f64) -> Self {
        OracleTruth { target: target.id(), value, mc_se: 0.0, method: OracleMethod::Analytic }
    }

    fn monte_carlo(target: &OracleTarget, draws: &[f64]) -> Self {
        OracleTruth {
            target: target.id(),
            value: mean(draws),
            mc_se: (variance_pop(draws) / draws.len() as f64).sqrt(),
            method: OracleMethod::MonteCarlo { n_mc: draws.len() },
        }
    }
}

/// Conditional CDF pairs `(theta_1, theta_0)` at `(y1, y0)` over `n_mc`
/// fresh draws of the conditioning variable.
fn conditional_cdf_draws(spec: &DgpSpec, y1: f64, y0: f64, n_mc: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng::seeded(seed);
    (0..n_mc)
        .map(|_| match spec {
            DgpSpec::Bounds(b) => {
                let x = [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
                (bounds_conditional_cdf(b.variant, 1, &x, y1), bounds_conditional_cdf(b.variant, 0, &x, y0))
            }
            DgpSpec::Iv(v) => {
                let z: f64 = StandardNormal.sample(&mut r);
                let c = |a: f64, y: f64| norm_cdf((y - iv_outcome_mean(v.outcome, a, z)) / IV_OUTCOME_SD);
                (c(1.0, y1), c(0.0, y0))
            }
        })
        .collect()
}

/// Closed-form marginal CDF where the design is linear-Gaussian.
fn analytic_marginal_cdf(spec: &DgpSpec, arm: u8, y: f64) -> Option<f64> {
    match spec {
        // mu_0(X) ~ N(0, 1.25) plus unit noise
        DgpSpec::Bounds(b) if b.variant == BoundsVariant::LinearScm => Some(norm_cdf((y - f64::from(arm)) / 1.5)),
        DgpSpec::Iv(v) if v.outcome == IvOutcome::Linear => {
            let m = 1.0 + 2.0 * f64::from(arm);
            Some(norm_cdf((y - m) / (9.0 + IV_OUTCOME_SD * IV_OUTCOME_SD).sqrt()))
        }
        _ => None,
    }
}

fn marginal_cdf(spec: &DgpSpec, arm: u8, y: f64, n_mc: usize, seed: u64) -> (f64, f64, OracleMethod) {
    if let Some(v) = analytic_marginal_cdf(spec, arm, y) {
        return (v, 0.0, OracleMethod::Analytic);
    }
    let draws: Vec<f64> = conditional_cdf_draws(spec, y, y, n_mc, seed)
        .into_iter()
        .map(|(t1, t0)| if arm == 1 { t1 } else { t0 })
        .collect();
    (mean(&draws), (variance_pop(&draws) / n_mc as f64).sqrt(), OracleMethod::MonteCarlo { n_mc })
}

fn require_mc(n_mc: usize) -> Result<()> {
    if n_mc < 2 {
        return Err(Error::InvalidConfig(format!("n_mc must be >= 2, got {n_mc}")));
    }
    Ok(())
}

/// Oracle value of `target` under `spec`. Closed forms are used where they
/// exist; otherwise `n_mc` fresh draws of the conditioning variable.
pub fn oracle_truth(spec: &DgpSpec, target: &OracleTarget, n_mc: usize, seed: u64) -> Result<OracleTruth> {
    match (*target, spec) {
        (OracleTarget::PotentialMean { a }, DgpSpec::Iv(v)) => {
            Ok(OracleTruth::analytic(target, iv_dose_truth(v.outcome, a)))
        }
        (OracleTarget::Ate { a1, a0 }, DgpSpec::Iv(v)) => {
            Ok(OracleTruth::analytic(target, iv_dose_truth(v.outcome, a1) - iv_dose_truth(v.outcome, a0)))
        }
        (OracleTarget::PotentialMean { a }, DgpSpec::Bounds(b)) if a == 0.0 || a == 1.0 => {
            let v = match b.variant {
                BoundsVariant::LinearScm => a,
                // E[sin 2X] = 0, E[cos 2X] = e^{-2}, E[X^2] = 1
                BoundsVariant::Nonlinear => 1.0 + a * (0.5 + (-2.0f64).exp()),
            };
            Ok(OracleTruth::analytic(target, v))
        }
        (OracleTarget::Ate { a1: 1.0, a0: 0.0 }, DgpSpec::Bounds(b)) => {
            let v = match b.variant {
                BoundsVariant::LinearScm => 1.0,
                BoundsVariant::Nonlinear => 0.5 + (-2.0f64).exp(),
            };
            Ok(OracleTruth::analytic(target, v))
        }
        (OracleTarget::MarginalCdf { arm, y }, _) => {
            if arm > 1 {
                return Err(Error::UnsupportedTarget(format!("arm {arm}")));
            }
            if analytic_marginal_cdf(spec, arm, y).is_none() {
                require_mc(n_mc)?;
            }
            let (value, mc_se, method) = marginal_cdf(spec, arm, y, n_mc, seed);
            Ok(OracleTruth { target: target.id(), value, mc_se, method })
        }
        (OracleTarget::MarginalLower { y1, y0 } | OracleTarget::MarginalUpper { y1, y0 }, _) => {
            let (f1, s1, m1) = marginal_cdf(spec, 1, y1, n_mc, seed);
            let (f0, s0, m0) = marginal_cdf(spec, 0, y0, n_mc, seed);
            let value = match target {
                OracleTarget::MarginalLower { .. } => (f1 + f0 - 1.0).max(0.0),
                _ => f1.min(f0),
            };
            let method = if m1 == OracleMethod::Analytic && m0 == OracleMethod::Analytic {
                OracleMethod::Analytic
            } else {
                require_mc(n_mc)?;
                OracleMethod::MonteCarlo { n_mc }
            };
            // conservative: the two marginal errors may be correlated
            Ok(OracleTruth { target: target.id(), value, mc_se: s1 + s0, method })
        }
        (
            OracleTarget::Lower { y1, y0 }
            | OracleTarget::Upper { y1, y0 }
            | OracleTarget::SmoothUpper { y1, y0, .. }
            | OracleTarget::SmoothLower { y1, y0, .. }
            | OracleTarget::Margin { y1, y0, .. },
            _,
        ) => {
            require_mc(n_mc)?;
            let pairs = conditional_cdf_draws(spec, y1, y0, n_mc, seed);
            let f: Box<dyn Fn(f64, f64) -> f64> = match *target {
                OracleTarget::Lower { .. } => Box::new(|u, v| (u + v - 1.0).max(0.0)),
                OracleTarget::Upper { .. } => Box::new(|u: f64, v: f64| u.min(v)),
                OracleTarget::SmoothUpper { t, .. } => Box::new(move |u, v| logsumexp_min(u, v, t)),
                OracleTarget::SmoothLower { t, .. } => Box::new(move |u, v| softplus_max(u + v - 1.0, t)),
                OracleTarget::Margin { gap, .. } => Box::new(move |u: f64, v: f64| f64::from(u8::from((u - v).abs() <= gap))),
                _ => unreachable!(),
            };
            let draws: Vec<f64> = pairs.iter().map(|&(u, v)| f(u, v)).collect();
            Ok(OracleTruth::monte_carlo(target, &draws))
        }
        (t, _) => Err(Error::UnsupportedTarget(t.id())),
    }
}

/// All four bound functionals at `(y1, y0)` from one set of draws, so that
/// orderings can be compared without independent Monte Carlo noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsOracle {
    pub y1: f64,
    pub y0: f64,
    pub marginal_lower: f64,
    pub lower: f64,
    pub upper: f64,
    pub marginal_upper: f64,
    /// Largest Monte Carlo standard error among the four.
    pub mc_se: f64,
}

pub fn bounds_oracle(spec: &DgpSpec, y1: f64, y0: f64, n_mc: usize, seed: u64) -> Result<BoundsOracle> {
    require_mc(n_mc)?;
    let pairs = conditional_cdf_draws(spec, y1, y0, n_mc, seed);
    let col = |f: &dyn Fn(f64, f64) -> f64| -> (f64, f64) {
        let d: Vec<f64> = pairs.iter().map(|&(u, v)| f(u, v)).collect();
        (mean(&d), (variance_pop(&d) / n_mc as f64).sqrt())
    };
    let (l, sl) = col(&|u, v| (u + v - 1.0).max(0.0));
    let (u, su) = col(&|u: f64, v: f64| u.min(v));
    let (f1, s1) = match analytic_marginal_cdf(spec, 1, y1) {
        Some(v) => (v, 0.0),
        None => col(&|u, _| u),
    };
    let (f0, s0) = match analytic_marginal_cdf(spec, 0, y0) {
        Some(v) => (v, 0.0),
        None => col(&|_, v| v),
    };
    Ok(BoundsOracle {
        y1,
        y0,
        marginal_lower: (f1 + f0 - 1.0).max(0.0),
        lower: l,
        upper: u,
        marginal_upper: f1.min(f0),
        mc_se: [sl, su, s1 + s0].into_iter().fold(0.0, f64::max),
    })
}

/// Writes the potential-outcome side table (`y0`, `y1`).
pub fn write_bounds_side_table<W: Write>(s: &BoundsSample, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["y0", "y1"])?;
    for (a, b) in s.y0.iter().zip(&s.y1) {
        out.write_record([format_float(*a), format_float(*b)])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the latent side table (`z_c`, `z_s`).
pub fn write_iv_side_table<W: Write>(s: &IvSample, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["z_c", "z_s"])?;
    for (a, b) in s.z_c.iter().zip(&s.z_s) {
        out.write_record([format_float(*a), format_float(*b)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bspec(variant: BoundsVariant, n: usize, seed: u64) -> BoundsDgpSpec {
        BoundsDgpSpec { variant, n, seed }
    }

    #[test]
    fn bounds_generation_is_deterministic() {
        let a = gen_bounds_dgp(&bspec(BoundsVariant::Nonlinear, 5, 3)).unwrap();
        let b = gen_bounds_dgp(&bspec(BoundsVariant::Nonlinear, 5, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_effect_is_exactly_one_and_side_table_consistent() {
        let s = gen_bounds_dgp(&bspec(BoundsVariant::LinearScm, 500, 1)).unwrap();
        for (i, o) in s.data.rows().iter().enumerate() {
            // y1 is built as y0 + 1.0; the subtraction may round by an ulp
            assert!((s.y1[i] - s.y0[i] - 1.0).abs() <= 4.0 * f64::EPSILON * (1.0 + s.y0[i].abs()));
            assert_eq!(o.y, if o.arm() == 1 { s.y1[i] } else { s.y0[i] });
        }
    }

    #[test]
    fn iv_generation_is_deterministic_and_typed() {
        let spec = IvDgpSpec { outcome: IvOutcome::Nonlinear, treatment: IvTreatment::Binary, n: 50, seed: 2 };
        let a = gen_iv_dgp(&spec).unwrap();
        assert_eq!(a, gen_iv_dgp(&spec).unwrap());
        assert_eq!(a.data.treatment_kind(), crate::TreatmentKind::Binary);
        assert!(a.data.has_instrument());
        let c = gen_iv_dgp(&IvDgpSpec { treatment: IvTreatment::Continuous, ..spec }).unwrap();
        assert_eq!(c.data.treatment_kind(), crate::TreatmentKind::Continuous);
        assert_eq!(c.data.treatments(), c.z_s);
    }

    #[test]
    fn n_below_two_rejected() {
        assert!(gen_bounds_dgp(&bspec(BoundsVariant::LinearScm, 1, 0)).is_err());
    }

    #[test]
    fn analytic_truths() {
        let iv = DgpSpec::Iv(IvDgpSpec { outcome: IvOutcome::Linear, treatment: IvTreatment::Continuous, n: 10, seed: 0 });
        assert_eq!(oracle_truth(&iv, &OracleTarget::PotentialMean { a: 0.5 }, 0, 0).unwrap().value, 2.0);
        let ivb = DgpSpec::Iv(IvDgpSpec { outcome: IvOutcome::Linear, treatment: IvTreatment::Binary, n: 10, seed: 0 });
        assert_eq!(oracle_truth(&ivb, &OracleTarget::Ate { a1: 1.0, a0: 0.0 }, 0, 0).unwrap().value, 2.0);
        let nl = DgpSpec::Iv(IvDgpSpec { outcome: IvOutcome::Nonlinear, treatment: IvTreatment::Binary, n: 10, seed: 0 });
        let ate = oracle_truth(&nl, &OracleTarget::Ate { a1: 1.0, a0: 0.0 }, 0, 0).unwrap().value;
        assert!((ate - 0.323_809_3).abs() < 1e-6, "{ate}");
        let lin = DgpSpec::Bounds(bspec(BoundsVariant::LinearScm, 10, 0));
        let f = oracle_truth(&lin, &OracleTarget::MarginalCdf { arm: 1, y: 1.0 }, 0, 0).unwrap();
        assert_eq!((f.value, f.method), (0.5, OracleMethod::Analytic));
    }

    #[test]
    fn marginal_cdf_matches_monte_carlo() {
        let lin = DgpSpec::Bounds(bspec(BoundsVariant::LinearScm, 10, 0));
        let draws: Vec<f64> = conditional_cdf_draws(&lin, 1.7, 0.0, 200_000, 5).into_iter().map(|p| p.0).collect();
        let exact = analytic_marginal_cdf(&lin, 1, 1.7).unwrap();
        let se = (variance_pop(&draws) / draws.len() as f64).sqrt();
        assert!((mean(&draws) - exact).abs() < 4.0 * se);
    }

    #[test]
    fn upper_tends_to_marginal_cdf_of_control() {
        let nl = DgpSpec::Bounds(bspec(BoundsVariant::Nonlinear, 10, 0));
        let u = oracle_truth(&nl, &OracleTarget::Upper { y1: 50.0, y0: 0.7 }, 20_000, 3).unwrap();
        let f0 = oracle_truth(&nl, &OracleTarget::MarginalCdf { arm: 0, y: 0.7 }, 20_000, 3).unwrap();
        assert!((u.value - f0.value).abs() < 1e-12);
    }

    #[test]
    fn unsupported_target() {
        let nl = DgpSpec::Bounds(bspec(BoundsVariant::Nonlinear, 10, 0));
        assert!(matches!(
            oracle_truth(&nl, &OracleTarget::PotentialMean { a: 0.5 }, 10, 0),
            Err(Error::UnsupportedTarget(_))
        ));
    }

    #[test]
    fn propensity_quadrature_matches_monte_carlo() {
        let x = [0.8, -1.1];
        let mut r = rng::seeded(8);
        let n = 200_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut r);
                sigmoid(bounds_index(&x) + 0.1 * e)
            })
            .collect();
        let se = (variance_pop(&draws) / n as f64).sqrt();
        assert!((bounds_propensity(&x) - mean(&draws)).abs() < 4.0 * se);
        // symmetric index gives one half
        assert!((bounds_propensity(&[0.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iv_propensity_matches_monte_carlo() {
        let z = 0.7;
        let mut r = rng::seeded(4);
        let n = 200_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = r.random_range(-2.0..2.0);
                let e: f64 = StandardNormal.sample(&mut r);
                sigmoid(first_stage_mean(s) + 0.2 * z + 0.2 * e)
            })
            .collect();
        let se = (variance_pop(&draws) / n as f64).sqrt();
        assert!((iv_propensity(z) - mean(&draws)).abs() < 4.0 * se);
    }
}
