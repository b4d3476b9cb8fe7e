//! Polynomial feature map over standardized inputs, plus the penalised
//! least-squares and logistic solvers the nuisance learners use.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::sigmoid;

/// Intercept, then (optionally) linear terms, then squares and pairwise
/// products of the standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub degree: u8,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl FeatureMap {
    /// Standardization constants come from `inputs` (the training fold).
    pub fn fit(inputs: &[Vec<f64>], degree: u8) -> FeatureMap {
        let d = inputs.first().map_or(0, Vec::len);
        let n = inputs.len().max(1) as f64;
        let mut means = vec![0.0; d];
        let mut sds = vec![1.0; d];
        for j in 0..d {
            let m = inputs.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = inputs.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            means[j] = m;
            sds[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        FeatureMap { degree: degree.min(2), means, sds }
    }

    pub fn input_dim(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        let d = self.input_dim();
        match self.degree {
            0 => 1,
            1 => 1 + d,
            _ => 1 + d + d * (d + 1) / 2,
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.push(1.0);
        if self.degree == 0 {
            return out;
        }
        let z: Vec<f64> = x.iter().zip(&self.means).zip(&self.sds).map(|((v, m), s)| (v - m) / s).collect();
        out.extend_from_slice(&z);
        if self.degree >= 2 {
            for j in 0..z.len() {
                for k in j..z.len() {
                    out.push(z[j] * z[k]);
                }
            }
        }
        out
    }

    pub fn design(&self, inputs: &[Vec<f64>]) -> DMatrix<f64> {
        let p = self.dim();
        let mut m = DMatrix::zeros(inputs.len(), p);
        for (i, x) in inputs.iter().enumerate() {
            for (j, v) in self.transform(x).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Solves `(X'X + penalty * D) beta = X'y` where `D` zeroes the intercept.
pub fn ridge(design: &DMatrix<f64>, y: &[f64], penalty: f64) -> Result<Vec<f64>> {
    let (n, p) = design.shape();
    if n == 0 || p == 0 {
        return Err(Error::DegenerateDesign("empty design matrix".into()));
    }
    let yv = DVector::from_column_slice(y);
    let mut gram = design.tr_mul(design);
    for j in 1..p {
        gram[(j, j)] += penalty;
    }
    let rhs = design.tr_mul(&yv);
    solve_spd(gram, rhs)
        .map(|b| b.iter().copied().collect())
        .ok_or_else(|| Error::DegenerateDesign("normal equations are singular".into()))
}

fn solve_spd(gram: DMatrix<f64>, rhs: DVector<f64>) -> Option<DVector<f64>> {
    match gram.clone().cholesky() {
        Some(ch) => Some(ch.solve(&rhs)),
        None => gram.lu().solve(&rhs),
    }
}

/// Outcome of a penalised logistic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Newton-Raphson (IRLS) for a logistic model with an L2 penalty on the
/// non-intercept coefficients. Stops when the gradient norm drops below
/// `tol` or after `max_iter` steps.
pub fn logistic(design: &DMatrix<f64>, labels: &[f64], penalty: f64, tol: f64, max_iter: usize) -> Result<LogisticFit> {
    let (n, p) = design.shape();
    if n == 0 || p == 0 {
        return Err(Error::DegenerateDesign("empty design matrix".into()));
    }
    let mut beta = DVector::zeros(p);
    let mean_label = labels.iter().sum::<f64>() / n as f64;
    beta[0] = (mean_label.clamp(1e-6, 1.0 - 1e-6) / (1.0 - mean_label.clamp(1e-6, 1.0 - 1e-6))).ln();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let eta = design * &beta;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-12);
            let row = design.row(i);
            let r = labels[i] - mu;
            for j in 0..p {
                grad[j] += r * row[j];
                let wj = w * row[j];
                for k in j..p {
                    hess[(j, k)] += wj * row[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                hess[(j, k)] = hess[(k, j)];
            }
        }
        for j in 1..p {
            grad[j] -= penalty * beta[j];
            hess[(j, j)] += penalty;
        }
        if grad.norm() < tol {
            converged = true;
            break;
        }
        let step = solve_spd(hess, grad).ok_or_else(|| Error::DegenerateDesign("singular logistic Hessian".into()))?;
        // Damp very long Newton steps; separated designs otherwise overshoot.
        let len = step.norm();
        let scale = if len > 10.0 { 10.0 / len } else { 1.0 };
        beta += step * scale;
    }
    Ok(LogisticFit { coef: beta.iter().copied().collect(), iterations, converged })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
