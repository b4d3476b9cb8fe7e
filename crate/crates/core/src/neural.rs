//! Small fully connected networks with tanh hidden layers, analytic
//! backpropagation and an Adam optimiser over flat parameter vectors.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Multilayer perceptron. Hidden layers use tanh, the output is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward`]; `inputs[l]` enters layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<DMatrix<f64>>,
}

/// Gradients with respect to parameters (flat, same order as
/// [`Mlp::params`]) and with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Vec<f64>,
    pub input: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Mlp> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer { w: DMatrix::zeros(w[1], w[0]), b: DVector::zeros(w[1]) })
            .collect();
        Ok(Mlp { sizes: sizes.to_vec(), layers })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(sizes: &[usize], rng: &mut Rng) -> Result<Mlp> {
        let mut m = Mlp::zeros(sizes)?;
        for layer in &mut m.layers {
            let (out, inp) = layer.w.shape();
            let a = (6.0 / (inp + out) as f64).sqrt();
            for v in layer.w.iter_mut() {
                *v = rng.random_range(-a..a);
            }
        }
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameters: per layer, weights row by row then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for r in 0..l.w.nrows() {
                out.extend(l.w.row(r).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", self.n_params(), p.len())));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let (rows, cols) = l.w.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.w[(r, c)] = p[k];
                    k += 1;
                }
            }
            for v in l.b.iter_mut() {
                *v = p[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Batch forward pass; rows of `x` are samples.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!("input width {} but network expects {}", x.ncols(), self.input_dim())));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &a * l.w.transpose();
            for mut row in z.row_iter_mut() {
                row += l.b.transpose();
            }
            inputs.push(a);
            a = if i < last { z.map(f64::tanh) } else { z };
        }
        Ok((a, ForwardCache { inputs }))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Backpropagates `grad_out = dLoss/dOutput` through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> Result<Backward> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("cache does not match network depth".into()));
        }
        let n = cache.inputs[0].nrows();
        if grad_out.shape() != (n, self.output_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} but expected ({n}, {})",
                grad_out.shape(),
                self.output_dim()
            )));
        }
        let mut per_layer: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        let mut input_grad = DMatrix::zeros(0, 0);
        for (i, l) in self.layers.iter().enumerate().rev() {
            let a = &cache.inputs[i];
            let dw = delta.transpose() * a;
            let db = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            per_layer.push((dw, db));
            let da = &delta * &l.w;
            if i > 0 {
                // a = tanh(z) of the previous layer
                delta = da.zip_map(a, |g, h| g * (1.0 - h * h));
            } else {
                input_grad = da;
            }
        }
        per_layer.reverse();
        let mut params = Vec::with_capacity(self.n_params());
        for (dw, db) in &per_layer {
            for r in 0..dw.nrows() {
                params.extend(dw.row(r).iter());
            }
            params.extend(db.iter());
        }
        Ok(Backward { params, input: input_grad })
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot { sizes: self.sizes.clone(), params: self.params() }
    }

    pub fn from_snapshot(s: &MlpSnapshot) -> Result<Mlp> {
        let mut m = Mlp::zeros(&s.sizes)?;
        m.set_params(&s.params)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Row-major matrix from per-sample rows.
pub fn batch(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}
