//! LSTM layer with masked steps.
//!
//! Gate rows are packed in the order input, forget, cell candidate, output:
//!
//! ```text
//! i, f, o = σ(W_x·x + W_h·h + b)    g = tanh(W_x·x + W_h·h + b)
//! c' = f⊙c + i⊙g                    h' = o⊙tanh(c')
//! ```
//!
//! A masked step leaves `(h, c)` untouched and emits zeros, which is the
//! same as skipping it. Internally every sequence is compacted to its valid
//! rows before the recursion runs.

use crate::error::{shape_err, Result};
use crate::tensor::{sigmoid, MaskMatrix, Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4H × input`
    pub w_x: Matrix,
    /// `4H × H`
    pub w_h: Matrix,
    /// `4H`
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// activated gates `[i, f, g, o]`
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Per-sequence cache over compacted (valid-only) rows.
#[derive(Debug, Clone)]
pub struct LstmSeqCache {
    x: Matrix,
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self { w_x: Matrix::zeros(4 * hidden, input), w_h: Matrix::zeros(4 * hidden, hidden), bias: vec![0.0; 4 * hidden] }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let h = self.hidden();
        let g = gate as usize;
        &mut self.bias[g * h..(g + 1) * h]
    }

    /// Runs the recursion over every row of `x` (all rows valid). Returns the
    /// `n × H` hidden states and the final `(h, c)`.
    pub fn forward_seq(&self, x: &Matrix, h0: &[f64], c0: &[f64]) -> (Matrix, Vec<f64>, Vec<f64>, LstmSeqCache) {
        let hdim = self.hidden();
        let mut h = h0.to_vec();
        let mut c = c0.to_vec();
        let mut out = Matrix::zeros(x.rows(), hdim);
        let mut steps = Vec::with_capacity(x.rows());
        let mut z = vec![0.0; 4 * hdim];
        // column-major copies turn each product into contiguous axpy updates
        let (wx_t, wh_t) = (self.w_x.transpose(), self.w_h.transpose());
        for t in 0..x.rows() {
            z.copy_from_slice(&self.bias);
            wx_t.tr_mul_vec_acc(x.row(t), &mut z);
            wh_t.tr_mul_vec_acc(&h, &mut z);
            let mut gates = z.clone();
            for (k, v) in gates.iter_mut().enumerate() {
                *v = if k / hdim == Gate::Cell as usize { v.tanh() } else { sigmoid(*v) };
            }
            let (i, rest) = gates.split_at(hdim);
            let (f, rest) = rest.split_at(hdim);
            let (g, o) = rest.split_at(hdim);
            let c_prev = c.clone();
            let h_prev = h.clone();
            let mut tanh_c = vec![0.0; hdim];
            for j in 0..hdim {
                c[j] = f[j] * c_prev[j] + i[j] * g[j];
                tanh_c[j] = c[j].tanh();
                h[j] = o[j] * tanh_c[j];
            }
            out.row_mut(t).copy_from_slice(&h);
            steps.push(StepCache { h_prev, c_prev, gates, tanh_c });
        }
        (out, h, c, LstmSeqCache { x: x.clone(), steps })
    }

    /// Backpropagation through time for one compacted sequence. `d_out` is
    /// the gradient w.r.t. every hidden output; returns `dL/dx`.
    pub fn backward_seq(&self, cache: &LstmSeqCache, d_out: &Matrix, grad: &mut LstmLayer) -> Matrix {
        let hdim = self.hidden();
        let mut dx = Matrix::zeros(cache.x.rows(), self.input());
        let mut dh_next = vec![0.0; hdim];
        let mut dc_next = vec![0.0; hdim];
        let mut dz = vec![0.0; 4 * hdim];
        for t in (0..cache.steps.len()).rev() {
            let s = &cache.steps[t];
            let (i, rest) = s.gates.split_at(hdim);
            let (f, rest) = rest.split_at(hdim);
            let (g, o) = rest.split_at(hdim);
            for j in 0..hdim {
                let dh = d_out.get(t, j) + dh_next[j];
                let d_o = dh * s.tanh_c[j];
                let dc = dh * o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
                let d_i = dc * g[j];
                let d_g = dc * i[j];
                let d_f = dc * s.c_prev[j];
                dc_next[j] = dc * f[j];
                dz[j] = d_i * i[j] * (1.0 - i[j]);
                dz[hdim + j] = d_f * f[j] * (1.0 - f[j]);
                dz[2 * hdim + j] = d_g * (1.0 - g[j] * g[j]);
                dz[3 * hdim + j] = d_o * o[j] * (1.0 - o[j]);
            }
            grad.w_x.add_outer(&dz, cache.x.row(t));
            grad.w_h.add_outer(&dz, &s.h_prev);
            for (b, d) in grad.bias.iter_mut().zip(&dz) {
                *b += d;
            }
            self.w_x.tr_mul_vec_acc(&dz, dx.row_mut(t));
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            self.w_h.tr_mul_vec_acc(&dz, &mut dh_next);
        }
        dx
    }
}

/// Output of [`lstm_forward`] over a batch.
#[derive(Debug, Clone)]
pub struct LstmBatchOutput {
    /// `[batch, time, H]`, zero at masked steps.
    pub hidden: Tensor3,
    pub final_h: Matrix,
    pub final_c: Matrix,
    pub caches: Vec<LstmSeqCache>,
}

/// Indices of the valid steps of mask row `b`.
pub(crate) fn valid_steps(mask: &MaskMatrix, b: usize) -> Vec<usize> {
    mask.row(b).iter().enumerate().filter_map(|(t, &v)| v.then_some(t)).collect()
}

/// Gathers the valid rows of sample `b` into a dense matrix.
pub(crate) fn compact(x: &Tensor3, b: usize, steps: &[usize]) -> Matrix {
    let f = x.feature();
    let mut values = Vec::with_capacity(steps.len() * f);
    for &t in steps {
        values.extend_from_slice(x.step(b, t));
    }
    Matrix::from_vec(steps.len(), f, values).expect("sized")
}

pub(crate) fn scatter(dst: &mut Tensor3, b: usize, steps: &[usize], rows: &Matrix) {
    for (k, &t) in steps.iter().enumerate() {
        dst.step_mut(b, t).copy_from_slice(rows.row(k));
    }
}

/// Batch LSTM with masking. `h0`/`c0` are `batch × H` (zeros when `None`).
pub fn lstm_forward(
    p: &LstmLayer,
    x: &Tensor3,
    mask: &MaskMatrix,
    h0: Option<&Matrix>,
    c0: Option<&Matrix>,
) -> Result<LstmBatchOutput> {
    mask.check_matches(x)?;
    if x.feature() != p.input() {
        return Err(shape_err(format!("lstm expects {} input features, got {}", p.input(), x.feature())));
    }
    let hdim = p.hidden();
    let zeros = Matrix::zeros(x.batch(), hdim);
    let h0 = h0.unwrap_or(&zeros);
    let c0 = c0.unwrap_or(&zeros);
    for m in [h0, c0] {
        if m.shape() != (x.batch(), hdim) {
            return Err(shape_err(format!("initial state {:?}, expected {:?}", m.shape(), (x.batch(), hdim))));
        }
    }
    let mut hidden = Tensor3::zeros(x.batch(), x.time(), hdim);
    let mut final_h = Matrix::zeros(x.batch(), hdim);
    let mut final_c = Matrix::zeros(x.batch(), hdim);
    let mut caches = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let steps = valid_steps(mask, b);
        let (out, h, c, cache) = p.forward_seq(&compact(x, b, &steps), h0.row(b), c0.row(b));
        scatter(&mut hidden, b, &steps, &out);
        final_h.row_mut(b).copy_from_slice(&h);
        final_c.row_mut(b).copy_from_slice(&c);
        caches.push(cache);
    }
    Ok(LstmBatchOutput { hidden, final_h, final_c, caches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(input: usize, hidden: usize, seed: u64) -> LstmLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = LstmLayer::zeros(input, hidden);
        for v in l.w_x.values_mut().iter_mut().chain(l.w_h.values_mut()).chain(l.bias.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        l
    }

    #[test]
    fn zero_parameters_give_zero_hidden() {
        let l = LstmLayer::zeros(3, 4);
        let x = Tensor3::from_vec(1, 5, 3, (0..15).map(|v| v as f64).collect()).unwrap();
        let out = lstm_forward(&l, &x, &MaskMatrix::all_valid(1, 5), None, None).unwrap();
        // gates 0.5, candidate tanh(0) = 0, so c and h stay 0
        assert!(out.hidden.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_masked_returns_initial_state() {
        let l = random_layer(2, 3, 1);
        let x = Tensor3::from_vec(1, 4, 2, vec![1.0; 8]).unwrap();
        let h0 = Matrix::from_rows(&[[0.1, 0.2, 0.3]]);
        let c0 = Matrix::from_rows(&[[-0.1, 0.0, 0.4]]);
        let mask = MaskMatrix::left_padded(4, &[0]);
        let out = lstm_forward(&l, &x, &mask, Some(&h0), Some(&c0)).unwrap();
        assert!(out.hidden.values().iter().all(|&v| v == 0.0));
        assert_eq!(out.final_h, h0);
        assert_eq!(out.final_c, c0);
    }

    #[test]
    fn masked_values_do_not_matter() {
        let l = random_layer(3, 4, 2);
        let mask = MaskMatrix::left_padded(6, &[4, 2]);
        let mut x = Tensor3::from_vec(2, 6, 3, (0..36).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let a = lstm_forward(&l, &x, &mask, None, None).unwrap();
        for b in 0..2 {
            for t in 0..6 {
                if !mask.is_valid(b, t) {
                    x.step_mut(b, t).iter_mut().for_each(|v| *v = 1e6);
                }
            }
        }
        let b = lstm_forward(&l, &x, &mask, None, None).unwrap();
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.final_h, b.final_h);
    }

    #[test]
    fn masked_step_passes_state_through() {
        // a masked step in the middle behaves as if it were absent
        let l = random_layer(2, 3, 3);
        let vals: Vec<f64> = (0..8).map(|v| v as f64 * 0.1).collect();
        let x = Tensor3::from_vec(1, 4, 2, vals.clone()).unwrap();
        let holey = MaskMatrix::from_flags(1, 4, vec![true, false, true, true]).unwrap();
        let with_hole = lstm_forward(&l, &x, &holey, None, None).unwrap();
        let mut kept = vals[0..2].to_vec();
        kept.extend_from_slice(&vals[4..8]);
        let x3 = Tensor3::from_vec(1, 3, 2, kept).unwrap();
        let dense = lstm_forward(&l, &x3, &MaskMatrix::all_valid(1, 3), None, None).unwrap();
        assert_eq!(with_hole.final_h, dense.final_h);
        assert_eq!(with_hole.final_c, dense.final_c);
        assert!(with_hole.hidden.step(0, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let l = LstmLayer::zeros(3, 2);
        let x = Tensor3::zeros(1, 2, 4);
        assert!(lstm_forward(&l, &x, &MaskMatrix::all_valid(1, 2), None, None).is_err());
        let x = Tensor3::zeros(1, 2, 3);
        assert!(lstm_forward(&l, &x, &MaskMatrix::all_valid(1, 3), None, None).is_err());
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let l = random_layer(3, 4, 5);
        let x = Matrix::from_vec(5, 3, (0..15).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap();
        let weights: Vec<f64> = (0..20).map(|v| (v as f64 * 1.3).sin()).collect();
        let loss = |layer: &LstmLayer| {
            let (out, ..) = layer.forward_seq(&x, &[0.0; 4], &[0.0; 4]);
            out.values().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, _, _, cache) = l.forward_seq(&x, &[0.0; 4], &[0.0; 4]);
        let d_out = Matrix::from_vec(5, 4, weights.clone()).unwrap();
        let mut grad = LstmLayer::zeros(3, 4);
        l.backward_seq(&cache, &d_out, &mut grad);
        let h = 1e-6;
        for idx in 0..l.w_h.values().len() {
            let mut plus = l.clone();
            plus.w_h.values_mut()[idx] += h;
            let mut minus = l.clone();
            minus.w_h.values_mut()[idx] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((numeric - grad.w_h.values()[idx]).abs() < 1e-7);
        }
    }
}
