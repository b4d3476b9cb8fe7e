//! Nuisance learners: conditional outcome CDFs, propensity scores, outcome
//! means and the generalized propensity score (conditional dose density).
//!
//! All learners share one design: a [`FeatureMap`] fitted on the training
//! fold followed by a penalised generalized linear model. Covariates are
//! whatever the dataset carries in `x` (observed `X`, or a learned latent
//! score in the IV pipeline).

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::features::{dot, logistic, ridge, FeatureMap};
use crate::stats::{isotonic_increasing, norm_pdf, quantile, sd, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    /// 0 = intercept only, 1 = linear, 2 = linear + squares + products.
    pub feature_degree: u8,
    pub clip_eps: f64,
    /// Ridge penalty is `ridge_scale * n_train` on standardized features.
    pub ridge_scale: f64,
    /// Logistic L2 penalty is `logistic_scale * n_train`.
    pub logistic_scale: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// GPS evaluations are floored at this in-sample density quantile.
    pub gps_trim_quantile: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            feature_degree: 2,
            clip_eps: 0.01,
            ridge_scale: 1e-3,
            logistic_scale: 1e-4,
            tol: 1e-8,
            max_iter: 500,
            gps_trim_quantile: 0.01,
        }
    }
}

impl NuisanceConfig {
    pub fn with_clip(clip_eps: f64) -> Self {
        NuisanceConfig { clip_eps, ..Default::default() }
    }
}

fn require_binary(data: &Dataset) -> Result<()> {
    if data.treatment_kind() != TreatmentKind::Binary {
        return Err(Error::InvalidConfig("this learner needs a binary treatment".into()));
    }
    Ok(())
}

fn arm_rows(data: &Dataset, arm: u8) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.n()).filter(|&i| data.rows()[i].arm() == arm).collect();
    if idx.is_empty() {
        return Err(Error::ArmMissing(arm));
    }
    Ok(idx)
}

/// Probability regression for one (arm, threshold) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellFit {
    /// All training indicators were equal.
    Constant(f64),
    Logistic(Vec<f64>),
}

impl CellFit {
    fn predict(&self, phi: &[f64]) -> f64 {
        match self {
            CellFit::Constant(p) => *p,
            CellFit::Logistic(b) => sigmoid(dot(b, phi)),
        }
    }
}

/// `theta_a(x) = P(Y <= y | A = a, X = x)` on a threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCdfModel {
    pub grid: Vec<f64>,
    pub features: FeatureMap,
    /// `cells[arm][g]`
    pub cells: [Vec<CellFit>; 2],
}

impl ConditionalCdfModel {
    /// Monotone-projected CDF curve over the whole grid.
    pub fn predict_curve(&self, arm: u8, x: &[f64]) -> Vec<f64> {
        let phi = self.features.transform(x);
        let raw: Vec<f64> = self.cells[arm as usize].iter().map(|c| c.predict(&phi)).collect();
        isotonic_increasing(&raw).into_iter().map(|p| p.clamp(0.0, 1.0)).collect()
    }

    /// CDF at threshold `y`, read as a step function of the grid: the value
    /// at the largest grid point `<= y`, or 0 below the grid.
    pub fn predict(&self, arm: u8, x: &[f64], y: f64) -> f64 {
        let pos = self.grid.partition_point(|g| *g <= y);
        if pos == 0 {
            return 0.0;
        }
        self.predict_curve(arm, x)[pos - 1]
    }

    pub fn grid_index(&self, y: f64) -> Option<usize> {
        self.grid.iter().position(|g| *g == y)
    }
}

/// Fits one probability regression of `1{Y <= y_g}` per arm and threshold.
pub fn fit_conditional_cdf(train: &Dataset, grid: &[f64], cfg: &NuisanceConfig) -> Result<ConditionalCdfModel> {
    require_binary(train)?;
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("threshold grid must be non-empty and strictly increasing".into()));
    }
    let arms = [arm_rows(train, 0)?, arm_rows(train, 1)?];
    let features = FeatureMap::fit(&train.covariates(), cfg.feature_degree);
    let mut cells: [Vec<CellFit>; 2] = [Vec::new(), Vec::new()];
    for (arm, idx) in arms.iter().enumerate() {
        let sub = train.subset(idx);
        let design = features.design(&sub.covariates());
        let ys = sub.ys();
        for &g in grid {
            let labels: Vec<f64> = ys.iter().map(|&y| f64::from(u8::from(y <= g))).collect();
            let first = labels[0];
            let fit = if labels.iter().all(|&l| l == first) {
                CellFit::Constant(first)
            } else {
                let pen = cfg.logistic_scale * idx.len() as f64;
                CellFit::Logistic(logistic(&design, &labels, pen, cfg.tol, cfg.max_iter)?.coef)
            };
            cells[arm].push(fit);
        }
    }
    Ok(ConditionalCdfModel { grid: grid.to_vec(), features, cells })
}

/// `pi_1(x) = P(A = 1 | X = x)`, clipped to `[clip_eps, 1 - clip_eps]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub features: FeatureMap,
    pub coef: Vec<f64>,
    pub clip_eps: f64,
    /// False when the solver hit its iteration cap; the last iterate is kept.
    pub converged: bool,
}

impl PropensityModel {
    pub fn predict_treated(&self, x: &[f64]) -> f64 {
        let p = sigmoid(dot(&self.coef, &self.features.transform(x)));
        p.clamp(self.clip_eps, 1.0 - self.clip_eps)
    }

    pub fn predict(&self, arm: u8, x: &[f64]) -> f64 {
        let p1 = self.predict_treated(x);
        if arm == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

pub fn fit_propensity(train: &Dataset, cfg: &NuisanceConfig) -> Result<PropensityModel> {
    require_binary(train)?;
    arm_rows(train, 0)?;
    arm_rows(train, 1)?;
    let features = FeatureMap::fit(&train.covariates(), cfg.feature_degree);
    let design = features.design(&train.covariates());
    let labels = train.treatments();
    let pen = cfg.logistic_scale * train.n() as f64;
    let fit = logistic(&design, &labels, pen, cfg.tol, cfg.max_iter)?;
    Ok(PropensityModel { features, coef: fit.coef, clip_eps: cfg.clip_eps, converged: fit.converged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeMeanFit {
    /// Separate regression per arm.
    PerArm([Vec<f64>; 2]),
    /// Joint regression on confounder features, standardized dose, its
    /// square and dose-by-feature interactions.
    Joint { coef: Vec<f64>, dose_mean: f64, dose_sd: f64 },
}

/// `m(a, x) = E[Y | A = a, X = x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMeanModel {
    pub features: FeatureMap,
    pub fit: OutcomeMeanFit,
}

fn joint_row(phi: &[f64], a_std: f64) -> Vec<f64> {
    let mut row = phi.to_vec();
    row.push(a_std);
    row.push(a_std * a_std);
    row.extend(phi[1..].iter().map(|f| f * a_std));
    row
}

impl OutcomeMeanModel {
    pub fn predict(&self, a: f64, x: &[f64]) -> f64 {
        let phi = self.features.transform(x);
        match &self.fit {
            OutcomeMeanFit::PerArm(arms) => dot(&arms[usize::from(a == 1.0)], &phi),
            OutcomeMeanFit::Joint { coef, dose_mean, dose_sd } => {
                dot(coef, &joint_row(&phi, (a - dose_mean) / dose_sd))
            }
        }
    }
}

pub fn fit_outcome_mean(train: &Dataset, cfg: &NuisanceConfig) -> Result<OutcomeMeanModel> {
    let xs = train.covariates();
    let features = FeatureMap::fit(&xs, cfg.feature_degree);
    let p = features.dim();
    let fit = match train.treatment_kind() {
        TreatmentKind::Binary => {
            let mut arms: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for arm in 0..2u8 {
                let idx = arm_rows(train, arm)?;
                if idx.len() <= p {
                    return Err(Error::DegenerateDesign(format!(
                        "arm {arm} has {} rows for {p} features",
                        idx.len()
                    )));
                }
                let sub = train.subset(&idx);
                let pen = cfg.ridge_scale * idx.len() as f64;
                arms[arm as usize] = ridge(&features.design(&sub.covariates()), &sub.ys(), pen)?;
            }
            OutcomeMeanFit::PerArm(arms)
        }
        TreatmentKind::Continuous => {
            let a = train.treatments();
            let dose_mean = a.iter().sum::<f64>() / a.len() as f64;
            let s = (a.iter().map(|v| (v - dose_mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
            let dose_sd = if s > 0.0 { s } else { 1.0 };
            let rows: Vec<Vec<f64>> = xs
                .iter()
                .zip(&a)
                .map(|(x, ai)| joint_row(&features.transform(x), (ai - dose_mean) / dose_sd))
                .collect();
            let q = rows[0].len();
            if train.n() <= q {
                return Err(Error::DegenerateDesign(format!("{} rows for {q} columns", train.n())));
            }
            let design = nalgebra::DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
            let pen = cfg.ridge_scale * train.n() as f64;
            OutcomeMeanFit::Joint { coef: ridge(&design, &train.ys(), pen)?, dose_mean, dose_sd }
        }
    };
    Ok(OutcomeMeanModel { features, fit })
}

/// Generalized propensity score `r(a | x)`: a regression of the dose on the
/// covariates plus a Gaussian KDE of its residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsModel {
    pub features: FeatureMap,
    pub mean_coef: Vec<f64>,
    /// Training residuals, sorted ascending.
    pub residuals: Vec<f64>,
    pub bandwidth: f64,
    pub trim_floor: f64,
}

/// Silverman's rule of thumb `1.06 * sd * n^(-1/5)`.
pub fn silverman_bandwidth(sd: f64, n: usize) -> f64 {
    1.06 * sd * (n as f64).powf(-0.2)
}

impl GpsModel {
    pub fn dose_mean(&self, x: &[f64]) -> f64 {
        dot(&self.mean_coef, &self.features.transform(x))
    }

    /// Untrimmed KDE of the residual distribution at `u`.
    pub fn residual_density(&self, u: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self.residuals.partition_point(|r| *r < u - 8.0 * h);
        let hi = self.residuals.partition_point(|r| *r <= u + 8.0 * h);
        let s: f64 = self.residuals[lo..hi].iter().map(|r| norm_pdf((u - r) / h)).sum();
        s / (self.residuals.len() as f64 * h)
    }

    pub fn density_raw(&self, a: f64, x: &[f64]) -> f64 {
        self.residual_density(a - self.dose_mean(x))
    }

    /// Trimmed density used in weights.
    pub fn density(&self, a: f64, x: &[f64]) -> f64 {
        self.density_raw(a, x).max(self.trim_floor)
    }
}

pub fn fit_gps(train: &Dataset, cfg: &NuisanceConfig) -> Result<GpsModel> {
    if train.treatment_kind() != TreatmentKind::Continuous {
        return Err(Error::InvalidConfig("generalized propensity score needs a continuous dose".into()));
    }
    let xs = train.covariates();
    let a = train.treatments();
    let sd_a = sd(&a);
    if !(sd_a > 0.0) {
        return Err(Error::ZeroVariance("treatment".into()));
    }
    let features = FeatureMap::fit(&xs, cfg.feature_degree);
    if train.n() <= features.dim() {
        return Err(Error::DegenerateDesign(format!("{} rows for {} features", train.n(), features.dim())));
    }
    let design = features.design(&xs);
    let mean_coef = ridge(&design, &a, cfg.ridge_scale * train.n() as f64)?;
    let mut residuals: Vec<f64> = xs.iter().zip(&a).map(|(x, ai)| ai - dot(&mean_coef, &features.transform(x))).collect();
    residuals.sort_by(f64::total_cmp);
    let mut model = GpsModel {
        features,
        mean_coef,
        bandwidth: silverman_bandwidth(sd_a, train.n()),
        residuals,
        trim_floor: 0.0,
    };
    let in_sample: Vec<f64> = model.residuals.iter().map(|&r| model.residual_density(r)).collect();
    model.trim_floor = quantile(&in_sample, cfg.gps_trim_quantile);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg_degree(d: u8) -> NuisanceConfig {
        NuisanceConfig { feature_degree: d, ..Default::default() }
    }

    fn binary_data(n: usize, seed: u64) -> Dataset {
        let mut r = rng::seeded(seed);
        let rows = (0..n)
            .map(|i| {
                let x: f64 = StandardNormal.sample(&mut r);
                let y: f64 = StandardNormal.sample(&mut r);
                Observation::new(y, (i % 2) as f64).with_x(vec![x])
            })
            .collect();
        Dataset::from_rows(rows).unwrap()
    }

    #[test]
    fn cdf_degenerate_indicator_is_one() {
        let d = binary_data(40, 1);
        let m = fit_conditional_cdf(&d, &[10.0, 11.0], &cfg_degree(2)).unwrap();
        for arm in 0..2 {
            assert_eq!(m.predict_curve(arm, &[0.3]), vec![1.0, 1.0]);
        }
    }

    #[test]
    fn cdf_intercept_only_is_empirical_cdf() {
        let d = binary_data(200, 2);
        let grid = [-0.5, 0.0, 0.7];
        let m = fit_conditional_cdf(&d, &grid, &cfg_degree(0)).unwrap();
        for arm in 0..2u8 {
            let ys: Vec<f64> = d.rows().iter().filter(|r| r.arm() == arm).map(|r| r.y).collect();
            for (g, &y) in grid.iter().enumerate() {
                let ecdf = ys.iter().filter(|&&v| v <= y).count() as f64 / ys.len() as f64;
                assert!((m.predict_curve(arm, &[5.0])[g] - ecdf).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cdf_rejects_bad_grid_and_missing_arm() {
        let d = binary_data(20, 3);
        assert!(fit_conditional_cdf(&d, &[1.0, 0.0], &cfg_degree(1)).is_err());
        let treated: Vec<usize> = (0..20).filter(|i| i % 2 == 1).collect();
        assert_eq!(
            fit_conditional_cdf(&d.subset(&treated), &[0.0], &cfg_degree(1)).unwrap_err(),
            Error::ArmMissing(0)
        );
    }

    #[test]
    fn step_lookup_below_and_between_grid() {
        let d = binary_data(100, 4);
        let m = fit_conditional_cdf(&d, &[-1.0, 1.0], &cfg_degree(1)).unwrap();
        assert_eq!(m.predict(0, &[0.0], -5.0), 0.0);
        assert_eq!(m.predict(0, &[0.0], 0.0), m.predict_curve(0, &[0.0])[0]);
    }

    #[test]
    fn propensity_balanced_intercept_only() {
        let d = binary_data(50, 5);
        let m = fit_propensity(&d, &cfg_degree(0)).unwrap();
        assert!((m.predict_treated(&[1.0]) - 0.5).abs() < 1e-12);
        assert!(m.converged);
    }

    #[test]
    fn propensity_separated_hits_clip_bounds() {
        let rows = (0..40)
            .map(|i| {
                let x = i as f64 - 19.5;
                Observation::new(0.0, if x > 0.0 { 1.0 } else { 0.0 }).with_x(vec![x])
            })
            .collect();
        let d = Dataset::from_rows(rows).unwrap();
        let cfg = NuisanceConfig { feature_degree: 1, logistic_scale: 0.0, ..Default::default() };
        let m = fit_propensity(&d, &cfg).unwrap();
        assert_eq!(m.predict_treated(&[-19.5]), 0.01);
        assert_eq!(m.predict_treated(&[19.5]), 0.99);
        assert_eq!(m.predict(0, &[19.5]), 1.0 - 0.99);
    }

    #[test]
    fn outcome_constant() {
        let rows = (0..30).map(|i| Observation::new(4.2, (i % 2) as f64).with_x(vec![i as f64])).collect();
        let m = fit_outcome_mean(&Dataset::from_rows(rows).unwrap(), &cfg_degree(2)).unwrap();
        assert!((m.predict(1.0, &[3.0]) - 4.2).abs() < 1e-10);
        assert!((m.predict(0.0, &[-7.0]) - 4.2).abs() < 1e-10);
    }

    #[test]
    fn outcome_exact_linear_continuous() {
        let mut r = rng::seeded(6);
        let rows = (0..200)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                let a: f64 = r.random_range(-1.0..2.0);
                Observation::new(1.0 + 2.0 * a + 3.0 * z, a).with_x(vec![z])
            })
            .collect();
        let cfg = NuisanceConfig { feature_degree: 1, ridge_scale: 1e-8 / 200.0, ..Default::default() };
        let m = fit_outcome_mean(&Dataset::from_rows(rows).unwrap(), &cfg).unwrap();
        for (a, z) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.5, -2.0)] {
            assert!((m.predict(a, &[z]) - (1.0 + 2.0 * a + 3.0 * z)).abs() < 1e-4);
        }
    }

    #[test]
    fn outcome_exact_linear_binary() {
        let mut r = rng::seeded(7);
        let rows = (0..100)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut r);
                let a = (i % 2) as f64;
                Observation::new(1.0 + 2.0 * a + 3.0 * z, a).with_x(vec![z])
            })
            .collect();
        let cfg = NuisanceConfig { feature_degree: 1, ridge_scale: 1e-10, ..Default::default() };
        let m = fit_outcome_mean(&Dataset::from_rows(rows).unwrap(), &cfg).unwrap();
        // intercept 1, treatment effect 2, slope 3
        assert!((m.predict(0.0, &[0.0]) - 1.0).abs() < 1e-4);
        assert!((m.predict(1.0, &[0.0]) - m.predict(0.0, &[0.0]) - 2.0).abs() < 1e-4);
        assert!((m.predict(0.0, &[1.0]) - m.predict(0.0, &[0.0]) - 3.0).abs() < 1e-4);
    }

    #[test]
    fn outcome_too_few_rows() {
        let rows = (0..4).map(|i| Observation::new(i as f64, (i % 2) as f64).with_x(vec![i as f64, 1.0])).collect();
        let d = Dataset::from_rows(rows).unwrap();
        assert!(matches!(fit_outcome_mean(&d, &cfg_degree(2)), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn silverman_value() {
        let h = silverman_bandwidth(1.0, 100);
        // 1.06 * 100^(-1/5) = 1.06 * 0.398107...
        assert!((h - 0.421_993_6).abs() < 1e-6, "{h}");
    }

    #[test]
    fn gps_kernel_at_zero_when_residuals_equal() {
        let rows = (0..20).map(|i| Observation::new(0.0, 0.5 + 2.0 * i as f64).with_x(vec![i as f64])).collect();
        let d = Dataset::from_rows(rows).unwrap();
        let cfg = NuisanceConfig { feature_degree: 1, ridge_scale: 0.0, ..Default::default() };
        let m = fit_gps(&d, &cfg).unwrap();
        assert!(m.residuals.iter().all(|r| r.abs() < 1e-9));
        let a = m.dose_mean(&[3.0]) + m.residuals[0];
        let expect = 1.0 / (m.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        assert!((m.density(a, &[3.0]) - expect).abs() < 1e-6 * expect);
    }

    #[test]
    fn gps_zero_variance() {
        let rows = (0..10).map(|i| Observation::new(0.0, 0.5).with_x(vec![i as f64])).collect();
        let d = Dataset::from_rows(rows).unwrap();
        // a constant non-binary dose is still continuous
        assert_eq!(d.treatment_kind(), TreatmentKind::Continuous);
        assert_eq!(fit_gps(&d, &cfg_degree(1)).unwrap_err(), Error::ZeroVariance("treatment".into()));
    }

    #[test]
    fn gps_integrates_to_one_and_respects_floor() {
        let mut r = rng::seeded(8);
        let rows = (0..400)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                let e: f64 = StandardNormal.sample(&mut r);
                Observation::new(0.0, 0.5 * z + 0.4 * e).with_x(vec![z])
            })
            .collect();
        let m = fit_gps(&Dataset::from_rows(rows).unwrap(), &cfg_degree(2)).unwrap();
        assert!(m.trim_floor > 0.0);
        for z in [-1.0, 0.0, 1.5] {
            let c = m.dose_mean(&[z]);
            let lo = c + m.residuals[0] - 6.0 * m.bandwidth;
            let hi = c + m.residuals[m.residuals.len() - 1] + 6.0 * m.bandwidth;
            let steps = 4000;
            let dx = (hi - lo) / steps as f64;
            let area: f64 = (0..steps).map(|i| m.density_raw(lo + (i as f64 + 0.5) * dx, &[z]) * dx).sum();
            assert!((0.98..=1.02).contains(&area), "{area}");
            assert!(m.density(hi + 10.0, &[z]) >= m.trim_floor);
        }
    }
}
