//! Hilbert–Schmidt Independence Criterion with Gaussian (RBF) kernels.
//!
//! The statistic is the biased V-statistic `trace(K H L H) / n^2`, which is
//! non-negative for positive semi-definite kernels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::quantile_in_place;

/// Largest sample used for exact median-heuristic bandwidths.
pub const MEDIAN_SUBSAMPLE: usize = 2000;
const MEDIAN_SEED: u64 = 0x5eed_4d11;

/// RBF kernel `exp(-|x - x'|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if bandwidth > 0.0 && bandwidth.is_finite() {
            Ok(KernelSpec { bandwidth })
        } else {
            Err(Error::InvalidConfig(format!("kernel bandwidth must be positive, got {bandwidth}")))
        }
    }

    pub fn median_heuristic(points: &[Vec<f64>]) -> Result<Self> {
        Ok(KernelSpec { bandwidth: median_bandwidth(points)? })
    }

    #[inline]
    pub fn eval_sq(&self, sq_dist: f64) -> f64 {
        (-sq_dist / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsicResult {
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub n_perm: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn scalars(xs: &[f64]) -> Vec<Vec<f64>> {
    xs.iter().map(|&v| vec![v]).collect()
}

/// Median pairwise Euclidean distance over all `i < j`. Inputs larger than
/// [`MEDIAN_SUBSAMPLE`] are subsampled with a fixed seed.
pub fn median_bandwidth(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::AllPointsIdentical);
    }
    let owned;
    let pts: &[Vec<f64>] = if points.len() > MEDIAN_SUBSAMPLE {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.shuffle(&mut rng::seeded(MEDIAN_SEED));
        owned = idx[..MEDIAN_SUBSAMPLE].iter().map(|&i| points[i].clone()).collect::<Vec<_>>();
        &owned
    } else {
        points
    };
    let mut d = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(&pts[i], &pts[j]).sqrt());
        }
    }
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::AllPointsIdentical);
    }
    let mean_d = d.iter().sum::<f64>() / d.len() as f64;
    let m = quantile_in_place(&mut d, 0.5);
    if m > 0.0 {
        Ok(m)
    } else {
        // more than half the pairs coincide; fall back to the mean distance
        Ok(mean_d)
    }
}

/// Dense Gram matrix, row-major `n x n`.
pub fn gram(points: &[Vec<f64>], k: KernelSpec) -> Vec<f64> {
    let n = points.len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        g[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = k.eval_sq(sq_dist(&points[i], &points[j]));
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

/// `H M H` for symmetric `M`.
pub fn double_center(m: &[f64], n: usize) -> Vec<f64> {
    let row_means: Vec<f64> = (0..n).map(|i| m[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[i * n + j] - row_means[i] - row_means[j] + grand;
        }
    }
    out
}

/// `trace(K H L H) / n^2 = sum_ij K_ij (HLH)_ij / n^2` from Gram matrices.
pub fn hsic_from_gram(k: &[f64], l: &[f64], n: usize) -> f64 {
    let lc = double_center(l, n);
    k.iter().zip(&lc).map(|(a, b)| a * b).sum::<f64>() / (n * n) as f64
}

pub fn hsic_stat(xs: &[Vec<f64>], ys: &[Vec<f64>], kx: KernelSpec, ky: KernelSpec) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidConfig("HSIC needs at least two points".into()));
    }
    Ok(hsic_from_gram(&gram(xs, kx), &gram(ys, ky), n))
}

/// HSIC with median-heuristic bandwidths on both sides. A constant sample
/// yields 0, since centering annihilates its Gram matrix.
pub fn hsic_auto(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    let kx = KernelSpec::median_heuristic(xs).unwrap_or(KernelSpec { bandwidth: 1.0 });
    let ky = KernelSpec::median_heuristic(ys).unwrap_or(KernelSpec { bandwidth: 1.0 });
    hsic_stat(xs, ys, kx, ky)
}

/// Permutation test permuting `ys` only.
/// `p = (1 + #{permuted >= observed}) / (1 + n_perm)`.
pub fn permutation_test(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    kx: KernelSpec,
    ky: KernelSpec,
    n_perm: usize,
    seed: u64,
) -> Result<HsicResult> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if n_perm < 99 {
        return Err(Error::InvalidConfig(format!("permutation test needs n_perm >= 99, got {n_perm}")));
    }
    let n = xs.len();
    let kc = double_center(&gram(xs, kx), n);
    let l = gram(ys, ky);
    let stat_with = |perm: &[usize]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            let pi = perm[i] * n;
            let row = &kc[i * n..(i + 1) * n];
            for j in 0..n {
                s += row[j] * l[pi + perm[j]];
            }
        }
        s / (n * n) as f64
    };
    let identity: Vec<usize> = (0..n).collect();
    let observed = stat_with(&identity);
    // relative slack so exact ties (e.g. constant ys) count as exceedances
    let slack = 1e-12 * observed.abs().max(1e-300);
    let mut r = rng::seeded(seed);
    let mut perm = identity.clone();
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        perm.shuffle(&mut r);
        if stat_with(&perm) >= observed - slack {
            exceed += 1;
        }
    }
    Ok(HsicResult {
        statistic: observed,
        p_value: Some((1 + exceed) as f64 / (1 + n_perm) as f64),
        n_perm,
    })
}

/// Permutation test with median-heuristic bandwidths.
pub fn permutation_test_auto(xs: &[Vec<f64>], ys: &[Vec<f64>], n_perm: usize, seed: u64) -> Result<HsicResult> {
    let kx = KernelSpec::median_heuristic(xs).unwrap_or(KernelSpec { bandwidth: 1.0 });
    let ky = KernelSpec::median_heuristic(ys).unwrap_or(KernelSpec { bandwidth: 1.0 });
    permutation_test(xs, ys, kx, ky, n_perm, seed)
}

/// HSIC between latent rows `z` and `s`, with the gradient with respect to
/// every `z_i`. Bandwidths are held fixed.
pub fn hsic_with_grad(z: &[Vec<f64>], s: &[Vec<f64>], kz: KernelSpec, ks: KernelSpec) -> (f64, Vec<Vec<f64>>) {
    let n = z.len();
    let d = z.first().map_or(0, Vec::len);
    let lc = double_center(&gram(s, ks), n);
    let inv_s2 = 1.0 / (kz.bandwidth * kz.bandwidth);
    let nn = (n * n) as f64;
    // diagonal: K_ii = 1 and no gradient
    let mut stat: f64 = (0..n).map(|i| lc[i * n + i]).sum();
    let mut grad = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in i + 1..n {
            let kij = kz.eval_sq(sq_dist(&z[i], &z[j]));
            let c = lc[i * n + j];
            stat += 2.0 * kij * c;
            // dK_ij/dz_i = -K_ij (z_i - z_j) / sigma^2; each pair appears twice
            let w = -2.0 * c * kij * inv_s2 / nn;
            for k in 0..d {
                let diff = z[i][k] - z[j][k];
                grad[i][k] += w * diff;
                grad[j][k] -= w * diff;
            }
        }
    }
    (stat / nn, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Expanded-sum form of the biased estimator:
    /// (1/n^2) sum K L + (1/n^4) sum K sum L - (2/n^3) sum_{i,j,q} K_ij L_iq
    fn expanded(xs: &[Vec<f64>], ys: &[Vec<f64>], kx: KernelSpec, ky: KernelSpec) -> f64 {
        let n = xs.len();
        let k = |i: usize, j: usize| kx.eval_sq(sq_dist(&xs[i], &xs[j]));
        let l = |i: usize, j: usize| ky.eval_sq(sq_dist(&ys[i], &ys[j]));
        let nf = n as f64;
        let (mut t1, mut sk, mut sl, mut t3) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                t1 += k(i, j) * l(i, j);
                sk += k(i, j);
                sl += l(i, j);
                for q in 0..n {
                    t3 += k(i, j) * l(i, q);
                }
            }
        }
        t1 / nf.powi(2) + sk * sl / nf.powi(4) - 2.0 * t3 / nf.powi(3)
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_bandwidth(&scalars(&[0.0, 1.0, 3.0])).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap(), 5.0);
        assert_eq!(median_bandwidth(&scalars(&[1.0, 1.0, 1.0])).unwrap_err(), Error::AllPointsIdentical);
    }

    #[test]
    fn constant_xs_gives_zero() {
        let xs = scalars(&[2.0; 6]);
        let ys = scalars(&[0.1, 0.5, -1.0, 2.0, 0.0, 3.0]);
        let k = KernelSpec::new(1.0).unwrap();
        assert!(hsic_stat(&xs, &ys, k, k).unwrap().abs() < 1e-15);
    }

    #[test]
    fn three_point_matches_expanded_sum() {
        let xs = scalars(&[0.0, 1.0, 2.0]);
        let k = KernelSpec::new(1.0).unwrap();
        let m = hsic_stat(&xs, &xs, k, k).unwrap();
        assert!((m - expanded(&xs, &xs, k, k)).abs() < 1e-10);
    }

    #[test]
    fn joint_relabeling_invariance_and_symmetry() {
        let mut r = rng::seeded(3);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] * x[1] + r.random::<f64>()]).collect();
        let (kx, ky) = (KernelSpec::new(0.7).unwrap(), KernelSpec::new(0.3).unwrap());
        let base = hsic_stat(&xs, &ys, kx, ky).unwrap();
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut r);
        let px: Vec<_> = perm.iter().map(|&i| xs[i].clone()).collect();
        let py: Vec<_> = perm.iter().map(|&i| ys[i].clone()).collect();
        assert!((hsic_stat(&px, &py, kx, ky).unwrap() - base).abs() < 1e-12);
        assert!((hsic_stat(&ys, &xs, ky, kx).unwrap() - base).abs() < 1e-12);
        assert!(base >= 0.0);
    }

    #[test]
    fn length_mismatch() {
        let k = KernelSpec::new(1.0).unwrap();
        assert_eq!(hsic_stat(&scalars(&[1.0, 2.0]), &scalars(&[1.0]), k, k).unwrap_err(), Error::LengthMismatch(2, 1));
        assert!(matches!(
            permutation_test(&scalars(&[1.0, 2.0]), &scalars(&[1.0]), k, k, 99, 0),
            Err(Error::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn constant_ys_p_is_one() {
        let xs = scalars(&(0..30).map(|i| i as f64).collect::<Vec<_>>());
        let ys = scalars(&[1.0; 30]);
        let k = KernelSpec::new(1.0).unwrap();
        let r = permutation_test(&xs, &ys, k, k, 99, 5).unwrap();
        assert_eq!(r.p_value, Some(1.0));
    }

    #[test]
    fn identical_samples_are_dependent() {
        let v: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let r = permutation_test_auto(&scalars(&v), &scalars(&v), 199, 11).unwrap();
        assert!(r.p_value.unwrap() <= 0.01, "{:?}", r.p_value);
        assert_eq!(r.p_value, Some(1.0 / 200.0));
    }

    #[test]
    fn gradient_matches_statistic_and_fd() {
        let mut r = rng::seeded(9);
        let z: Vec<Vec<f64>> = (0..12).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
        let s: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0] * v[1] + 0.3 * r.random::<f64>()]).collect();
        let (kz, ks) = (KernelSpec::new(0.4).unwrap(), KernelSpec::new(0.5).unwrap());
        let (stat, grad) = hsic_with_grad(&z, &s, kz, ks);
        assert!((stat - hsic_stat(&z, &s, kz, ks).unwrap()).abs() < 1e-14);
        let h = 1e-6;
        for i in 0..z.len() {
            for k in 0..2 {
                let mut zp = z.clone();
                zp[i][k] += h;
                let mut zm = z.clone();
                zm[i][k] -= h;
                let fd = (hsic_with_grad(&zp, &s, kz, ks).0 - hsic_with_grad(&zm, &s, kz, ks).0) / (2.0 * h);
                assert!((fd - grad[i][k]).abs() < 1e-8, "{i},{k}: {fd} vs {}", grad[i][k]);
            }
        }
    }
}
