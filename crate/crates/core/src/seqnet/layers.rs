//! Dense, layer normalization and inverted dropout on `rows × width`
//! matrices of valid (unmasked) steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Fully connected layer, `y = act(W·x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self { weight: Matrix::zeros(output, input), bias: vec![0.0; output], activation }
    }

    pub fn input(&self) -> usize {
        self.weight.cols()
    }

    pub fn output(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        self.weight.mul_vec_acc(x, out);
        for v in out.iter_mut() {
            *v = self.activation.apply(*v);
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output());
        for r in 0..x.rows() {
            self.forward_row(x.row(r), out.row_mut(r));
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    /// `y` is the forward output, `dy` the upstream gradient.
    pub fn backward(&self, x: &Matrix, y: &Matrix, dy: &Matrix, grad: &mut Dense) -> Matrix {
        let mut dx = Matrix::zeros(x.rows(), self.input());
        let mut dz = vec![0.0; self.output()];
        for r in 0..x.rows() {
            for ((d, &g), &yv) in dz.iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                *d = g * self.activation.grad_from_output(yv);
            }
            grad.weight.add_outer(&dz, x.row(r));
            for (b, d) in grad.bias.iter_mut().zip(&dz) {
                *b += d;
            }
            self.weight.tr_mul_vec_acc(&dz, dx.row_mut(r));
        }
        dx
    }
}

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize, eps: f64) -> Self {
        Self { gain: vec![1.0; width], bias: vec![0.0; width], eps }
    }

    pub fn width(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let n = x.cols() as f64;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut normalized = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let var_eps = var + self.eps;
            // constant row with eps = 0: define the normalized row as zeros
            let inv = if var_eps > 0.0 { 1.0 / var_eps.sqrt() } else { 0.0 };
            inv_std.push(inv);
            let nrow = normalized.row_mut(r);
            for (nv, &v) in nrow.iter_mut().zip(row) {
                *nv = (v - mean) * inv;
            }
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = normalized.get(r, j) * self.gain[j] + self.bias[j];
            }
        }
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let (rows, cols) = dy.shape();
        let n = cols as f64;
        let mut dx = Matrix::zeros(rows, cols);
        let mut dxhat = vec![0.0; cols];
        for r in 0..rows {
            let xhat = cache.normalized.row(r);
            let g = dy.row(r);
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for j in 0..cols {
                grad.gain[j] += g[j] * xhat[j];
                grad.bias[j] += g[j];
                dxhat[j] = g[j] * self.gain[j];
                sum_d += dxhat[j];
                sum_dx += dxhat[j] * xhat[j];
            }
            let inv = cache.inv_std[r];
            for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                *d = inv / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
            }
        }
        dx
    }
}

/// Per-element survivor scale (`0` or `1/(1−rate)`); `None` when dropout
/// was a no-op.
pub type DropoutMask = Option<Vec<f64>>;

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout in place. Identity outside training or at rate 0.
pub fn dropout_in_place<R: Rng + ?Sized>(rate: f64, training: bool, rng: &mut R, x: &mut [f64]) -> DropoutMask {
    if !training || rate == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let scales: Vec<f64> = x.iter().map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    for (v, s) in x.iter_mut().zip(&scales) {
        *v *= s;
    }
    Some(scales)
}

pub fn dropout_backward(mask: &DropoutMask, dy: &mut [f64]) {
    if let Some(scales) = mask {
        for (d, s) in dy.iter_mut().zip(scales) {
            *d *= s;
        }
    }
}

pub fn dropout_forward<R: Rng + ?Sized>(
    rate: f64,
    training: bool,
    rng: &mut R,
    x: &Matrix,
) -> Result<(Matrix, DropoutMask)> {
    check_dropout_rate(rate)?;
    let mut out = x.clone();
    let mask = dropout_in_place(rate, training, rng, out.values_mut());
    Ok((out, mask))
}
