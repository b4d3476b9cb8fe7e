//! Instrumental-variable VAE.
//!
//! Encoder `q(z | A, Y, S)` is Gaussian with diagonal covariance; decoders
//! are `p(A | S, z) = N(mu_A(S, z), sigma_A^2)` and
//! `p(Y | A, z) = N(mu_Y(A, z), sigma_Y^2)` with learnable scalar variances.
//! Training minimises reconstruction NLL plus `beta * KL` plus
//! `lambda * HSIC(z, S)` so that the latent carries confounding variation
//! but stays independent of the instrument.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LogvarMode, VaeConfig};
use crate::error::{Error, Result};
use crate::hsic::{self, KernelSpec};
use crate::neural::{adam_step, AdamState, Mlp, MlpSnapshot};
use crate::rng::{self, Rng};

/// Log-variances are clamped to this range.
pub const LOGVAR_BOUND: f64 = 10.0;
/// Minimum training rows.
pub const MIN_TRAIN_ROWS: usize = 200;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FINAL_HSIC_ROWS: usize = 1000;

/// Per-column affine standardization for `(A, Y, S)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub sd: [f64; 3],
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer { mean: [0.0; 3], sd: [1.0; 3] }
    }

    pub fn fit(rows: &[[f64; 3]]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut st = Standardizer::identity();
        for c in 0..3 {
            let m = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n;
            st.mean[c] = m;
            st.sd[c] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        st
    }

    pub fn apply(&self, r: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|c| (r[c] - self.mean[c]) / self.sd[c])
    }
}

/// `(A, Y, S)` triples from a dataset with an instrument.
pub fn ays_rows(data: &Dataset) -> Result<Vec<[f64; 3]>> {
    if !data.has_instrument() {
        return Err(Error::MissingInstrument);
    }
    Ok(data.rows().iter().map(|o| [o.a, o.y, o.s.expect("instrument present")]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvVaeModel {
    pub latent_dim: usize,
    pub encoder: Mlp,
    pub dec_a: Mlp,
    pub dec_y: Mlp,
    pub logvar_a: f64,
    pub logvar_y: f64,
    /// When set, `logvar_a` is held at its value and receives no gradient.
    pub freeze_logvar_a: bool,
    pub standardizer: Standardizer,
}

/// Loss split into its parts (batch means; `hsic` is unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub hsic: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<LossParts>,
    /// HSIC between encoded latents and the instrument on (up to 1000)
    /// training rows after training; `None` when no epochs ran.
    pub final_hsic: Option<f64>,
}

/// Kernel bandwidths for the penalty; `None` means median heuristic per batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PenaltyBandwidth {
    pub fixed: Option<(f64, f64)>,
}

fn clamp_logvar(raw: f64) -> (f64, bool) {
    if raw > LOGVAR_BOUND {
        (LOGVAR_BOUND, true)
    } else if raw < -LOGVAR_BOUND {
        (-LOGVAR_BOUND, true)
    } else {
        (raw, false)
    }
}

/// Closed-form `KL(N(mu, e^lv) || N(0, 1))` summed over dimensions.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter().zip(logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

impl IvVaeModel {
    /// Xavier-initialised model; decoder log-variances start at 0.
    pub fn init(cfg: &VaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let sizes = |inp: usize, out: usize| {
            let mut v = vec![inp];
            v.extend(&cfg.hidden);
            v.push(out);
            v
        };
        Ok(IvVaeModel {
            latent_dim: d,
            encoder: Mlp::xavier(&sizes(3, 2 * d), rng)?,
            dec_a: Mlp::xavier(&sizes(1 + d, 1), rng)?,
            dec_y: Mlp::xavier(&sizes(1 + d, 1), rng)?,
            logvar_a: 0.0,
            logvar_y: 0.0,
            freeze_logvar_a: false,
            standardizer: Standardizer::identity(),
        })
    }

    /// Applies a resolved treatment log-variance mode.
    pub fn set_treatment_logvar(&mut self, mode: LogvarMode) {
        match mode {
            LogvarMode::Fixed(v) => {
                self.logvar_a = v;
                self.freeze_logvar_a = true;
            }
            _ => self.freeze_logvar_a = false,
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.dec_a.n_params() + self.dec_y.n_params() + 2
    }

    /// Encoder, decoder A, decoder Y, then the two decoder log-variances.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.dec_a.params());
        p.extend(self.dec_y.params());
        p.push(self.logvar_a);
        p.push(self.logvar_y);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", self.n_params(), p.len())));
        }
        let (e, a) = (self.encoder.n_params(), self.dec_a.n_params());
        let y = self.dec_y.n_params();
        self.encoder.set_params(&p[..e])?;
        self.dec_a.set_params(&p[e..e + a])?;
        self.dec_y.set_params(&p[e + a..e + a + y])?;
        self.logvar_a = p[e + a + y];
        self.logvar_y = p[e + a + y + 1];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    /// Total loss and its gradient on a standardized minibatch `batch` of
    /// `(a, y, s)` rows with frozen reparameterization noise `eps`
    /// (`batch.len() x latent_dim`).
    pub fn loss_and_grads(
        &self,
        batch: &[[f64; 3]],
        eps: &DMatrix<f64>,
        beta: f64,
        lambda: f64,
        bw: PenaltyBandwidth,
    ) -> Result<(LossParts, Vec<f64>)> {
        let b = batch.len();
        let d = self.latent_dim;
        if b < 2 {
            return Err(Error::ShapeMismatch("minibatch needs at least two rows".into()));
        }
        if eps.shape() != (b, d) {
            return Err(Error::ShapeMismatch(format!("noise shape {:?}, expected ({b}, {d})", eps.shape())));
        }
        let bf = b as f64;
        let x = DMatrix::from_fn(b, 3, |i, j| batch[i][j]);
        let (enc_out, enc_cache) = self.encoder.forward(&x)?;

        let mut mu = DMatrix::zeros(b, d);
        let mut lv = DMatrix::zeros(b, d);
        let mut lv_clamped = vec![false; b * d];
        for i in 0..b {
            for k in 0..d {
                mu[(i, k)] = enc_out[(i, k)];
                let (v, c) = clamp_logvar(enc_out[(i, d + k)]);
                lv[(i, k)] = v;
                lv_clamped[i * d + k] = c;
            }
        }
        let sigma = lv.map(|v| (0.5 * v).exp());
        let z = &mu + sigma.component_mul(eps);

        let in_a = DMatrix::from_fn(b, 1 + d, |i, j| if j == 0 { batch[i][2] } else { z[(i, j - 1)] });
        let in_y = DMatrix::from_fn(b, 1 + d, |i, j| if j == 0 { batch[i][0] } else { z[(i, j - 1)] });
        let (out_a, cache_a) = self.dec_a.forward(&in_a)?;
        let (out_y, cache_y) = self.dec_y.forward(&in_y)?;

        let (lva, lva_c) = clamp_logvar(self.logvar_a);
        let (lvy, lvy_c) = clamp_logvar(self.logvar_y);
        let (pa, py) = ((-lva).exp(), (-lvy).exp());

        let mut recon = 0.0;
        let mut g_out_a = DMatrix::zeros(b, 1);
        let mut g_out_y = DMatrix::zeros(b, 1);
        let (mut g_lva, mut g_lvy) = (0.0, 0.0);
        for i in 0..b {
            let ra = out_a[(i, 0)] - batch[i][0];
            let ry = out_y[(i, 0)] - batch[i][1];
            recon += 0.5 * (LN_2PI + lva + ra * ra * pa) + 0.5 * (LN_2PI + lvy + ry * ry * py);
            g_out_a[(i, 0)] = ra * pa / bf;
            g_out_y[(i, 0)] = ry * py / bf;
            g_lva += 0.5 * (1.0 - ra * ra * pa) / bf;
            g_lvy += 0.5 * (1.0 - ry * ry * py) / bf;
        }
        recon /= bf;
        if lva_c || self.freeze_logvar_a {
            g_lva = 0.0;
        }
        if lvy_c {
            g_lvy = 0.0;
        }

        let mut kl = 0.0;
        for i in 0..b {
            let m: Vec<f64> = (0..d).map(|k| mu[(i, k)]).collect();
            let l: Vec<f64> = (0..d).map(|k| lv[(i, k)]).collect();
            kl += gaussian_kl(&m, &l);
        }
        kl /= bf;

        let back_a = self.dec_a.backward(&cache_a, &g_out_a)?;
        let back_y = self.dec_y.backward(&cache_y, &g_out_y)?;
        let mut g_z = DMatrix::from_fn(b, d, |i, k| back_a.input[(i, k + 1)] + back_y.input[(i, k + 1)]);

        let mut hsic_val = 0.0;
        if lambda > 0.0 {
            let zr: Vec<Vec<f64>> = (0..b).map(|i| (0..d).map(|k| z[(i, k)]).collect()).collect();
            let sr: Vec<Vec<f64>> = batch.iter().map(|r| vec![r[2]]).collect();
            let kernels = match bw.fixed {
                Some((hz, hs)) => Some((KernelSpec::new(hz)?, KernelSpec::new(hs)?)),
                None => match (hsic::median_bandwidth(&zr), hsic::median_bandwidth(&sr)) {
                    (Ok(hz), Ok(hs)) => Some((KernelSpec { bandwidth: hz }, KernelSpec { bandwidth: hs })),
                    // a constant latent or instrument carries no dependence
                    _ => None,
                },
            };
            if let Some((kz, ks)) = kernels {
                let (h, gh) = hsic::hsic_with_grad(&zr, &sr, kz, ks);
                hsic_val = h;
                for i in 0..b {
                    for k in 0..d {
                        g_z[(i, k)] += lambda * gh[i][k];
                    }
                }
            }
        } else if let Some((hz, hs)) = bw.fixed {
            let zr: Vec<Vec<f64>> = (0..b).map(|i| (0..d).map(|k| z[(i, k)]).collect()).collect();
            let sr: Vec<Vec<f64>> = batch.iter().map(|r| vec![r[2]]).collect();
            hsic_val = hsic::hsic_stat(&zr, &sr, KernelSpec::new(hz)?, KernelSpec::new(hs)?)?;
        }

        // z = mu + exp(lv / 2) * eps
        let mut g_enc = DMatrix::zeros(b, 2 * d);
        for i in 0..b {
            for k in 0..d {
                let gz = g_z[(i, k)];
                g_enc[(i, k)] = gz + beta * mu[(i, k)] / bf;
                let g_lv = gz * 0.5 * sigma[(i, k)] * eps[(i, k)] + beta * 0.5 * (lv[(i, k)].exp() - 1.0) / bf;
                g_enc[(i, d + k)] = if lv_clamped[i * d + k] { 0.0 } else { g_lv };
            }
        }
        let back_e = self.encoder.backward(&enc_cache, &g_enc)?;

        let mut grads = back_e.params;
        grads.extend(back_a.params);
        grads.extend(back_y.params);
        grads.push(g_lva);
        grads.push(g_lvy);
        let total = recon + beta * kl + lambda * hsic_val;
        Ok((LossParts { total, recon, kl, hsic: hsic_val }, grads))
    }

    /// Posterior means for raw (unstandardized) `(a, y, s)` rows.
    pub fn encode_rows(&self, rows: &[[f64; 3]]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = DMatrix::from_fn(rows.len(), 3, |i, j| self.standardizer.apply(&rows[i])[j]);
        let out = self.encoder.predict(&x)?;
        Ok((0..rows.len()).map(|i| (0..self.latent_dim).map(|k| out[(i, k)]).collect()).collect())
    }

    pub fn encode(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.encode_rows(&ays_rows(data)?)
    }

    pub fn snapshot(&self) -> IvVaeSnapshot {
        IvVaeSnapshot {
            latent_dim: self.latent_dim,
            encoder: self.encoder.snapshot(),
            dec_a: self.dec_a.snapshot(),
            dec_y: self.dec_y.snapshot(),
            logvar_a: self.logvar_a,
            logvar_y: self.logvar_y,
            freeze_logvar_a: self.freeze_logvar_a,
            standardizer: self.standardizer,
        }
    }

    pub fn from_snapshot(s: &IvVaeSnapshot) -> Result<Self> {
        Ok(IvVaeModel {
            latent_dim: s.latent_dim,
            encoder: Mlp::from_snapshot(&s.encoder)?,
            dec_a: Mlp::from_snapshot(&s.dec_a)?,
            dec_y: Mlp::from_snapshot(&s.dec_y)?,
            logvar_a: s.logvar_a,
            logvar_y: s.logvar_y,
            freeze_logvar_a: s.freeze_logvar_a,
            standardizer: s.standardizer,
        })
    }
}

/// JSON checkpoint layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvVaeSnapshot {
    pub latent_dim: usize,
    pub encoder: MlpSnapshot,
    pub dec_a: MlpSnapshot,
    pub dec_y: MlpSnapshot,
    pub logvar_a: f64,
    pub logvar_y: f64,
    #[serde(default)]
    pub freeze_logvar_a: bool,
    pub standardizer: Standardizer,
}

/// Treatment-decoder log-variance used by `Auto` for 0/1 treatments.
pub const BINARY_TREATMENT_LOGVAR: f64 = 2.0;

/// Resolves `Auto`: fixed at [`BINARY_TREATMENT_LOGVAR`] for 0/1 treatments, learned otherwise.
pub fn resolve_logvar_mode(mode: LogvarMode, rows: &[[f64; 3]]) -> LogvarMode {
    match mode {
        LogvarMode::Auto if rows.iter().all(|r| r[0] == 0.0 || r[0] == 1.0) => LogvarMode::Fixed(BINARY_TREATMENT_LOGVAR),
        LogvarMode::Auto => LogvarMode::Learned,
        m => m,
    }
}

/// Trains on raw `(a, y, s)` rows. Deterministic given `seed`.
pub fn train_rows(rows: &[[f64; 3]], cfg: &VaeConfig, seed: u64) -> Result<(IvVaeModel, TrainLog)> {
    cfg.validate()?;
    if rows.len() < MIN_TRAIN_ROWS {
        return Err(Error::InvalidConfig(format!(
            "IV-VAE training needs at least {MIN_TRAIN_ROWS} rows, got {}",
            rows.len()
        )));
    }
    let mut r = rng::seeded(seed);
    let mut model = IvVaeModel::init(cfg, &mut r)?;
    model.set_treatment_logvar(resolve_logvar_mode(cfg.treatment_logvar, rows));
    let st = Standardizer::fit(rows);
    model.standardizer = st;
    let std_rows: Vec<[f64; 3]> = rows.iter().map(|x| st.apply(x)).collect();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let d = cfg.latent_dim;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut acc = LossParts::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<[f64; 3]> = chunk.iter().map(|&i| std_rows[i]).collect();
            let eps = DMatrix::from_fn(chunk.len(), d, |_, _| StandardNormal.sample(&mut r));
            let (parts, grads) =
                model.loss_and_grads(&batch, &eps, cfg.beta, cfg.lambda, PenaltyBandwidth::default())?;
            if !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            adam_step(&mut params, &grads, &mut adam)?;
            model.set_params(&params)?;
            if !model.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let w = chunk.len() as f64;
            acc.total += w * parts.total;
            acc.recon += w * parts.recon;
            acc.kl += w * parts.kl;
            acc.hsic += w * parts.hsic;
            seen += chunk.len();
        }
        let s = seen.max(1) as f64;
        log.epochs.push(LossParts { total: acc.total / s, recon: acc.recon / s, kl: acc.kl / s, hsic: acc.hsic / s });
    }
    log.final_hsic = Some(final_hsic(&model, rows, seed)?);
    Ok((model, log))
}

pub fn train(data: &Dataset, cfg: &VaeConfig, seed: u64) -> Result<(IvVaeModel, TrainLog)> {
    train_rows(&ays_rows(data)?, cfg, seed)
}

fn final_hsic(model: &IvVaeModel, rows: &[[f64; 3]], seed: u64) -> Result<f64> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut rng::seeded(rng::mix(seed, 0xf1)));
    idx.truncate(FINAL_HSIC_ROWS);
    let sub: Vec<[f64; 3]> = idx.iter().map(|&i| rows[i]).collect();
    let z = model.encode_rows(&sub)?;
    let s = hsic::scalars(&sub.iter().map(|r| r[2]).collect::<Vec<_>>());
    hsic::hsic_auto(&z, &s)
}

pub const TRAIN_LOG_HEADER: [&str; 5] = ["epoch", "loss", "recon", "kl", "hsic"];

pub fn write_train_log<W: Write>(log: &TrainLog, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRAIN_LOG_HEADER)?;
    for (e, p) in log.epochs.iter().enumerate() {
        out.write_record([
            e.to_string(),
            crate::data::format_float(p.total),
            crate::data::format_float(p.recon),
            crate::data::format_float(p.kl),
            crate::data::format_float(p.hsic),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn small_cfg() -> VaeConfig {
        VaeConfig { hidden: vec![5, 4], epochs: 3, batch_size: 64, ..VaeConfig::default() }
    }

    fn random_batch(r: &mut Rng, b: usize) -> Vec<[f64; 3]> {
        (0..b).map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect()
    }

    fn synthetic_rows(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let s: f64 = r.random_range(-2.0..2.0);
                let zc: f64 = StandardNormal.sample(&mut r);
                let a = 0.5 * s + 0.2 * zc;
                [a, 1.0 + 2.0 * a + 3.0 * zc, s]
            })
            .collect()
    }

    #[test]
    fn kl_is_zero_at_prior_and_non_negative() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let mut r = rng::seeded(1);
        for _ in 0..1000 {
            let m = r.random_range(-5.0..5.0);
            let l = r.random_range(-10.0..10.0);
            assert!(gaussian_kl(&[m], &[l]) >= 0.0);
        }
    }

    #[test]
    fn zero_lambda_constant_latent_has_no_hsic() {
        let mut r = rng::seeded(2);
        let mut m = IvVaeModel::init(&small_cfg(), &mut r).unwrap();
        let e = m.encoder.n_params();
        let mut p = m.params();
        // zero the encoder so mu = 0 and logvar = 0; zero noise keeps z constant
        p[..e].iter_mut().for_each(|v| *v = 0.0);
        m.set_params(&p).unwrap();
        let batch = random_batch(&mut r, 8);
        let eps = DMatrix::zeros(8, 1);
        let (parts, grads) = m.loss_and_grads(&batch, &eps, 1.0, 0.0, PenaltyBandwidth::default()).unwrap();
        assert_eq!(parts.hsic, 0.0);
        assert_eq!(parts.kl, 0.0);
        let (parts10, grads10) = m.loss_and_grads(&batch, &eps, 1.0, 10.0, PenaltyBandwidth::default()).unwrap();
        assert_eq!(parts10.total, parts.total);
        assert_eq!(grads10, grads);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut r = rng::seeded(100 + seed);
            let m = IvVaeModel::init(&small_cfg(), &mut r).unwrap();
            let batch = random_batch(&mut r, 8);
            let eps = DMatrix::from_fn(8, 1, |_, _| StandardNormal.sample(&mut r));
            let bw = PenaltyBandwidth { fixed: Some((0.8, 1.1)) };
            let (_, g) = m.loss_and_grads(&batch, &eps, 1.0, 10.0, bw).unwrap();
            let p = m.params();
            let h = 1e-5;
            for k in 0..p.len() {
                let mut mm = m.clone();
                let mut q = p.clone();
                q[k] += h;
                mm.set_params(&q).unwrap();
                let up = mm.loss_and_grads(&batch, &eps, 1.0, 10.0, bw).unwrap().0.total;
                q[k] -= 2.0 * h;
                mm.set_params(&q).unwrap();
                let down = mm.loss_and_grads(&batch, &eps, 1.0, 10.0, bw).unwrap().0.total;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} param {k}: fd {fd} analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let rows = synthetic_rows(250, 1);
        let cfg = VaeConfig { epochs: 0, ..small_cfg() };
        let (m, log) = train_rows(&rows, &cfg, 4).unwrap();
        let init = IvVaeModel::init(&cfg, &mut rng::seeded(4)).unwrap();
        assert_eq!(m.params(), init.params());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let rows = synthetic_rows(300, 2);
        let a = train_rows(&rows, &small_cfg(), 9).unwrap();
        let b = train_rows(&rows, &small_cfg(), 9).unwrap();
        assert_eq!(a.0.params(), b.0.params());
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.encode_rows(&rows).unwrap(), a.0.encode_rows(&rows).unwrap());
    }

    #[test]
    fn zero_output_layer_encodes_to_zero() {
        let mut m = IvVaeModel::init(&small_cfg(), &mut rng::seeded(3)).unwrap();
        let last = m.encoder.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(0.0);
        let z = m.encode_rows(&synthetic_rows(10, 3)).unwrap();
        assert!(z.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn too_few_rows_and_missing_instrument() {
        assert!(matches!(train_rows(&synthetic_rows(50, 1), &small_cfg(), 0), Err(Error::InvalidConfig(_))));
        let data = Dataset::from_rows(vec![crate::Observation::new(1.0, 0.0), crate::Observation::new(2.0, 1.0)]).unwrap();
        assert_eq!(train(&data, &small_cfg(), 0).unwrap_err(), Error::MissingInstrument);
    }

    #[test]
    fn snapshot_round_trip() {
        let m = IvVaeModel::init(&small_cfg(), &mut rng::seeded(5)).unwrap();
        let json = serde_json::to_string(&m.snapshot()).unwrap();
        let back = IvVaeModel::from_snapshot(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn reparameterization_is_unbiased() {
        let mut r = rng::seeded(6);
        let m = IvVaeModel::init(&small_cfg(), &mut r).unwrap();
        let row = [0.3, -0.5, 1.2];
        let out = m.encoder.predict(&DMatrix::from_row_slice(1, 3, &row)).unwrap();
        let (mu, sigma) = (out[(0, 0)], (0.5 * clamp_logvar(out[(0, 1)]).0).exp());
        let draws = 100_000;
        let mean = (0..draws).map(|_| { let e: f64 = StandardNormal.sample(&mut r); mu + sigma * e }).sum::<f64>() / draws as f64;
        assert!((mean - mu).abs() < 3.0 * sigma / (draws as f64).sqrt());
    }
}
