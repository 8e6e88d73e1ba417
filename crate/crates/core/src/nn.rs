//! Minimal dense-layer primitives with explicit backward passes.
//!
//! Everything runs in f64: gradients stay clean enough for tight
//! finite-difference comparisons, and analytic loss identities hold to 1e-9.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named weight matrix with its gradient accumulator. Vectors are stored
/// as 1 x n matrices so every parameter shares one shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub w: Array2<f64>,
    pub g: Array2<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            w: Array2::zeros((rows, cols)),
            g: Array2::zeros((rows, cols)),
        }
    }

    pub fn normal(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Self::zeros(name, rows, cols);
        for v in p.w.iter_mut() {
            *v = std * gauss(rng);
        }
        p
    }

    pub fn ones(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let mut p = Self::zeros(name, rows, cols);
        p.w.fill(1.0);
        p
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Box-Muller standard normal.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Affine map `y = x W + b` over row-major activations (steps x features).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // in x out
    pub bias: Param,   // 1 x out
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::normal(format!("{name}.weight"), d_in, d_out, std, rng),
            bias: Param::zeros(format!("{name}.bias"), 1, d_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.w) + &self.bias.w.row(0)
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.weight.g += &x.t().dot(dy);
        self.bias.g += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.w.t())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param, // 1 x d
    pub beta: Param,  // 1 x d
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: Param::ones(format!("{name}.gamma"), 1, d),
            beta: Param::zeros(format!("{name}.beta"), 1, d),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let inv_std: Array1<f64> = xhat
            .rows()
            .into_iter()
            .map(|r| {
                let var = r.iter().map(|v| v * v).sum::<f64>() / d;
                1.0 / (var + self.eps).sqrt()
            })
            .collect();
        for (mut row, &s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma.w.row(0) + &self.beta.w.row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        self.gamma.g += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.g += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        // dxhat = dy * gamma; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * inv_std
        let dxhat = dy * &self.gamma.w.row(0);
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, (row, xr)) in dxhat.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
            let mean_dx = row.sum() / d;
            let mean_dx_x = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                *out = (row[j] - mean_dx - xr[j] * mean_dx_x) * cache.inv_std[i];
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = x.mapv(gelu_grad);
    dx *= dy;
    dx
}

/// Numerically stable row softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Stable log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
