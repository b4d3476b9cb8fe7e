//! Fréchet–Hoeffding bounds on the joint CDF `F_{Y(1),Y(0)}(y1, y0)`.
//!
//! Conditional bounds average the pointwise bounds of the conditional CDFs
//! `theta_a(x) = P(Y <= y_a | A = a, X = x)`:
//!
//! ```text
//! L = E[max(theta_1 + theta_0 - 1, 0)]      U = E[min(theta_1, theta_0)]
//! ```
//!
//! Three estimators are provided for them: a plug-in average, a direct
//! doubly-robust estimator that selects the arm attaining the minimum, and
//! doubly-robust estimators of log-sum-exp smoothed versions of both bounds.
//! Standard errors use the empirical variance of the per-row score.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Dataset, FoldMode, FoldRole};
use crate::error::{Error, Result};
use crate::nuisance::{fit_conditional_cdf, fit_propensity, NuisanceConfig};
use crate::stats::{mean, quantile, sigmoid, softplus, ScoreSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundKind {
    MarginalL,
    MarginalU,
    PluginL,
    PluginU,
    DrDirectU,
    DrSmoothU,
    DrSmoothL,
}

impl BoundKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::MarginalL => "marginal_l",
            BoundKind::MarginalU => "marginal_u",
            BoundKind::PluginL => "plugin_l",
            BoundKind::PluginU => "plugin_u",
            BoundKind::DrDirectU => "dr_direct_u",
            BoundKind::DrSmoothU => "dr_smooth_u",
            BoundKind::DrSmoothL => "dr_smooth_l",
        }
    }
}

/// A bound estimate at one threshold pair. `value` and the interval are
/// truncated to [0, 1]; `raw` keeps the untruncated estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub y1: f64,
    pub y0: f64,
    pub kind: BoundKind,
    pub value: f64,
    pub raw: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub t: Option<f64>,
}

impl BoundEstimate {
    fn from_summary(kind: BoundKind, s: ScoreSummary, t: Option<f64>) -> Self {
        let (lo, hi) = s.ci();
        BoundEstimate {
            y1: f64::NAN,
            y0: f64::NAN,
            kind,
            value: s.value.clamp(0.0, 1.0),
            raw: s.value,
            se: s.se,
            ci_lo: lo.clamp(0.0, 1.0),
            ci_hi: hi.clamp(0.0, 1.0),
            t,
        }
    }

    pub fn at(mut self, y1: f64, y0: f64) -> Self {
        self.y1 = y1;
        self.y0 = y0;
        self
    }

    /// Whether the untruncated Wald interval contains `truth`.
    pub fn raw_covers(&self, truth: f64) -> bool {
        let half = crate::stats::Z_975 * self.se;
        (self.raw - half..=self.raw + half).contains(&truth)
    }
}

/// Nuisance values attached to one evaluation row at a threshold pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerPointNuisance {
    /// `theta_0(x)` at `y0`
    pub theta0: f64,
    /// `theta_1(x)` at `y1`
    pub theta1: f64,
    /// clipped `pi_1(x)`
    pub pi1: f64,
    pub arm: u8,
    /// `1{Y <= y0}`
    pub below0: bool,
    /// `1{Y <= y1}`
    pub below1: bool,
}

impl PerPointNuisance {
    pub fn theta(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.theta1
        } else {
            self.theta0
        }
    }

    pub fn pi(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.pi1
        } else {
            1.0 - self.pi1
        }
    }

    /// `1{A = a} / pi_a(x) * (1{Y <= y_a} - theta_a(x))`
    pub fn residual(&self, arm: u8) -> f64 {
        if self.arm != arm {
            return 0.0;
        }
        let below = if arm == 1 { self.below1 } else { self.below0 };
        (f64::from(u8::from(below)) - self.theta(arm)) / self.pi(arm)
    }
}

/// Pointwise Fréchet–Hoeffding bounds `(max(u1 + u0 - 1, 0), min(u1, u0))`.
pub fn fh_pointwise(u1: f64, u0: f64) -> Result<(f64, f64)> {
    for u in [u1, u0] {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::OutOfRange(u));
        }
    }
    Ok(((u1 + u0 - 1.0).max(0.0), u1.min(u0)))
}

/// Smooth minimum `-(1/t) log(e^{-t u} + e^{-t v})`.
pub fn logsumexp_min(u: f64, v: f64, t: f64) -> f64 {
    let m = u.min(v);
    m - (-t * (u - v).abs()).exp().ln_1p() / t
}

/// Smooth positive part `(1/t) log(1 + e^{t s})`, the lower-bound surrogate.
pub fn softplus_max(s: f64, t: f64) -> f64 {
    softplus(t * s) / t
}

/// Softmin weights `(w_0, w_1)` with `w_a ∝ e^{-t theta_a}`.
pub fn softmin_weights(theta0: f64, theta1: f64, t: f64) -> (f64, f64) {
    let w0 = sigmoid(t * (theta1 - theta0));
    (w0, 1.0 - w0)
}

/// Selector `argmin_a theta_a`, ties to arm 0.
pub fn selector(theta0: f64, theta1: f64) -> u8 {
    u8::from(theta1 < theta0)
}

pub fn direct_upper_score(r: &PerPointNuisance) -> f64 {
    let d = selector(r.theta0, r.theta1);
    r.theta(d) + r.residual(d)
}

pub fn smooth_upper_score(r: &PerPointNuisance, t: f64) -> f64 {
    let (w0, w1) = softmin_weights(r.theta0, r.theta1, t);
    w0 * r.residual(0) + w1 * r.residual(1) + logsumexp_min(r.theta0, r.theta1, t)
}

pub fn smooth_lower_score(r: &PerPointNuisance, t: f64) -> f64 {
    let s = r.theta0 + r.theta1 - 1.0;
    let w = sigmoid(t * s);
    w * (r.residual(0) + r.residual(1)) + softplus_max(s, t)
}

/// Doubly-robust score for the marginal CDF `F_{Y(a)}(y_a)`.
pub fn marginal_cdf_score(r: &PerPointNuisance, arm: u8) -> f64 {
    r.theta(arm) + r.residual(arm)
}

fn nonempty(rows: &[PerPointNuisance]) -> Result<()> {
    if rows.is_empty() {
        Err(Error::EmptyEvaluationSet)
    } else {
        Ok(())
    }
}

/// Plug-in averages of the pointwise bounds. The standard error is the
/// naive sample SD over sqrt(n), with no influence-function correction.
pub fn plugin_bounds(rows: &[PerPointNuisance]) -> Result<(BoundEstimate, BoundEstimate)> {
    nonempty(rows)?;
    let lo: Vec<f64> = rows.iter().map(|r| (r.theta1 + r.theta0 - 1.0).max(0.0)).collect();
    let up: Vec<f64> = rows.iter().map(|r| r.theta1.min(r.theta0)).collect();
    Ok((
        BoundEstimate::from_summary(BoundKind::PluginL, ScoreSummary::from_scores(&lo), None),
        BoundEstimate::from_summary(BoundKind::PluginU, ScoreSummary::from_scores(&up), None),
    ))
}

pub fn dr_direct_upper(rows: &[PerPointNuisance]) -> Result<BoundEstimate> {
    nonempty(rows)?;
    let scores: Vec<f64> = rows.iter().map(direct_upper_score).collect();
    Ok(BoundEstimate::from_summary(BoundKind::DrDirectU, ScoreSummary::from_scores(&scores), None))
}

pub fn dr_smooth_upper(rows: &[PerPointNuisance], t: f64) -> Result<BoundEstimate> {
    nonempty(rows)?;
    let scores: Vec<f64> = rows.iter().map(|r| smooth_upper_score(r, t)).collect();
    Ok(BoundEstimate::from_summary(BoundKind::DrSmoothU, ScoreSummary::from_scores(&scores), Some(t)))
}

pub fn dr_smooth_lower(rows: &[PerPointNuisance], t: f64) -> Result<BoundEstimate> {
    nonempty(rows)?;
    let scores: Vec<f64> = rows.iter().map(|r| smooth_lower_score(r, t)).collect();
    Ok(BoundEstimate::from_summary(BoundKind::DrSmoothL, ScoreSummary::from_scores(&scores), Some(t)))
}

/// Marginal (covariate-free) bounds from doubly-robust estimates of the two
/// marginal CDFs. Standard errors follow the active branch of min / max.
pub fn marginal_bounds(rows: &[PerPointNuisance]) -> Result<(BoundEstimate, BoundEstimate)> {
    nonempty(rows)?;
    let s1: Vec<f64> = rows.iter().map(|r| marginal_cdf_score(r, 1)).collect();
    let s0: Vec<f64> = rows.iter().map(|r| marginal_cdf_score(r, 0)).collect();
    let (f1, f0) = (ScoreSummary::from_scores(&s1), ScoreSummary::from_scores(&s0));
    let upper = if f1.value <= f0.value { f1 } else { f0 };
    let sum: Vec<f64> = s1.iter().zip(&s0).map(|(a, b)| a + b - 1.0).collect();
    let sum = ScoreSummary::from_scores(&sum);
    let lower = if sum.value > 0.0 { sum } else { ScoreSummary { value: 0.0, se: 0.0 } };
    Ok((
        BoundEstimate::from_summary(BoundKind::MarginalL, lower, None),
        BoundEstimate::from_summary(BoundKind::MarginalU, upper, None),
    ))
}

/// Empirical tie-mass curve `P(|theta_1 - theta_0| <= t)` over `t_grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginProfile {
    pub t_grid: Vec<f64>,
    pub curve: Vec<f64>,
    pub perturbation: f64,
    /// Share of rows whose selector can flip when each `theta_a` moves by
    /// at most `perturbation`, i.e. with gap `<= 2 * perturbation`.
    pub flip_fraction: f64,
}

/// Selector-stability diagnostic. The margin exponent itself is not
/// estimated; the curve is reported for inspection.
pub fn margin_profile(rows: &[PerPointNuisance], t_grid: &[f64], perturbation: f64) -> Result<MarginProfile> {
    nonempty(rows)?;
    if t_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("margin grid must be sorted".into()));
    }
    let gaps: Vec<f64> = rows.iter().map(|r| (r.theta1 - r.theta0).abs()).collect();
    let n = gaps.len() as f64;
    let curve = t_grid.iter().map(|&t| gaps.iter().filter(|&&g| g <= t).count() as f64 / n).collect();
    let flip_fraction = gaps.iter().filter(|&&g| g <= 2.0 * perturbation).count() as f64 / n;
    Ok(MarginProfile { t_grid: t_grid.to_vec(), curve, perturbation, flip_fraction })
}

/// `(U_marg - L_marg) - (U_cond - L_cond)`.
pub fn width_reduction(marginal: (f64, f64), conditional: (f64, f64)) -> f64 {
    (marginal.1 - marginal.0) - (conditional.1 - conditional.0)
}

/// Which bound estimators to compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSelection {
    pub marginal: bool,
    pub plugin: bool,
    pub dr_direct: bool,
    pub dr_smooth_upper: bool,
    pub dr_smooth_lower: bool,
}

impl Default for BoundSelection {
    fn default() -> Self {
        BoundSelection { marginal: true, plugin: true, dr_direct: true, dr_smooth_upper: true, dr_smooth_lower: true }
    }
}

impl From<&crate::data::EstimatorFlags> for BoundSelection {
    fn from(f: &crate::data::EstimatorFlags) -> Self {
        BoundSelection {
            marginal: f.marginal,
            plugin: f.plugin,
            dr_direct: f.dr_direct,
            dr_smooth_upper: f.dr_smooth_upper,
            dr_smooth_lower: f.dr_smooth_lower,
        }
    }
}

/// Runs the selected estimators on one threshold pair.
pub fn estimate_pair(rows: &[PerPointNuisance], y1: f64, y0: f64, t: f64, sel: BoundSelection) -> Result<Vec<BoundEstimate>> {
    let mut out = Vec::new();
    if sel.marginal {
        let (l, u) = marginal_bounds(rows)?;
        out.push(l);
        out.push(u);
    }
    if sel.plugin {
        let (l, u) = plugin_bounds(rows)?;
        out.push(l);
        out.push(u);
    }
    if sel.dr_direct {
        out.push(dr_direct_upper(rows)?);
    }
    if sel.dr_smooth_upper {
        out.push(dr_smooth_upper(rows, t)?);
    }
    if sel.dr_smooth_lower {
        out.push(dr_smooth_lower(rows, t)?);
    }
    Ok(out.into_iter().map(|e| e.at(y1, y0)).collect())
}

/// Default 3 x 3 threshold grid: arm-wise outcome quantiles 0.25/0.5/0.75.
pub fn default_thresholds(data: &Dataset) -> Vec<(f64, f64)> {
    let arm_y = |arm: u8| -> Vec<f64> { data.rows().iter().filter(|r| r.arm() == arm).map(|r| r.y).collect() };
    let (y1s, y0s) = (arm_y(1), arm_y(0));
    let ps = [0.25, 0.5, 0.75];
    let mut out = Vec::new();
    for &p1 in &ps {
        for &p0 in &ps {
            out.push((quantile(&y1s, p1), quantile(&y0s, p0)));
        }
    }
    out
}

/// Sorted, deduplicated union of all thresholds in `pairs`.
pub fn threshold_union(pairs: &[(f64, f64)]) -> Vec<f64> {
    let mut g: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Cross-fitted nuisances: for every row, `theta` and `pi` come from models
/// trained on the other folds. Returns `rows[pair][row]` in row order.
pub fn cross_fit_rows(
    data: &Dataset,
    pairs: &[(f64, f64)],
    k: usize,
    seed: u64,
    cfg: &NuisanceConfig,
) -> Result<Vec<Vec<PerPointNuisance>>> {
    let plan = make_folds(data.n(), k, FoldMode::Double, seed)?;
    let grid = threshold_union(pairs);
    let mut out = vec![vec![None; data.n()]; pairs.len()];
    for rot in 0..plan.n_rotations() {
        let train = data.subset(&plan.rows_with_role(rot, FoldRole::Nuisance));
        let eval_idx = plan.rows_with_role(rot, FoldRole::Evaluation);
        let cdf = fit_conditional_cdf(&train, &grid, cfg)?;
        let ps = fit_propensity(&train, cfg)?;
        for &i in &eval_idx {
            let obs = &data.rows()[i];
            let c1 = cdf.predict_curve(1, &obs.x);
            let c0 = cdf.predict_curve(0, &obs.x);
            let pi1 = ps.predict_treated(&obs.x);
            for (p, &(y1, y0)) in pairs.iter().enumerate() {
                let g1 = cdf.grid_index(y1).expect("threshold in grid");
                let g0 = cdf.grid_index(y0).expect("threshold in grid");
                out[p][i] = Some(PerPointNuisance {
                    theta0: c0[g0],
                    theta1: c1[g1],
                    pi1,
                    arm: obs.arm(),
                    below0: obs.y <= y0,
                    below1: obs.y <= y1,
                });
            }
        }
    }
    Ok(out.into_iter().map(|v| v.into_iter().map(|r| r.expect("every row evaluated once")).collect()).collect())
}

/// Cross-fits nuisances and runs the selected estimators at every pair.
pub fn estimate_bounds(
    data: &Dataset,
    pairs: &[(f64, f64)],
    k: usize,
    t: f64,
    seed: u64,
    cfg: &NuisanceConfig,
    sel: BoundSelection,
) -> Result<Vec<BoundEstimate>> {
    let rows = cross_fit_rows(data, pairs, k, seed, cfg)?;
    let mut out = Vec::new();
    for (p, &(y1, y0)) in pairs.iter().enumerate() {
        out.extend(estimate_pair(&rows[p], y1, y0, t, sel)?);
    }
    Ok(out)
}

pub const BOUNDS_CSV_HEADER: [&str; 9] = ["y1", "y0", "kind", "value", "raw", "se", "ci_lo", "ci_hi", "t"];

pub fn write_bounds_csv<W: Write>(estimates: &[BoundEstimate], w: W) -> Result<()> {
    use crate::data::format_float as f;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(BOUNDS_CSV_HEADER)?;
    for e in estimates {
        wtr.write_record([
            f(e.y1),
            f(e.y0),
            e.kind.name().to_string(),
            f(e.value),
            f(e.raw),
            f(e.se),
            f(e.ci_lo),
            f(e.ci_hi),
            e.t.map(f).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mean of `min(theta_1, theta_0)`; used by oracles and diagnostics.
pub fn mean_pointwise_upper(theta: &[(f64, f64)]) -> f64 {
    mean(&theta.iter().map(|(a, b)| a.min(*b)).collect::<Vec<_>>())
}
