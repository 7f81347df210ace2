//! Vanilla recurrent cell, kept as a reference for the LSTM.

use crate::error::{shape_err, Result};
use crate::seqnet::layers::Activation;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RnnCellParams {
    /// `hidden × input`
    pub w_x: Matrix,
    /// `hidden × hidden`
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
    /// `output × hidden`
    pub w_y: Matrix,
    pub b_y: Vec<f64>,
    pub activation: Activation,
}

impl RnnCellParams {
    fn check(&self) -> Result<()> {
        let h = self.w_h.rows();
        if self.w_h.cols() != h || self.w_x.rows() != h || self.b_h.len() != h {
            return Err(shape_err(format!(
                "rnn hidden weights {:?}/{:?} and bias {} do not chain",
                self.w_x.shape(),
                self.w_h.shape(),
                self.b_h.len()
            )));
        }
        if self.w_y.cols() != h || self.w_y.rows() != self.b_y.len() {
            return Err(shape_err(format!("rnn output weights {:?} do not fit hidden size {h}", self.w_y.shape())));
        }
        Ok(())
    }
}

/// Runs `h_{t+1} = f(W_x·x_t + W_h·h_t + b_h)` and `y = f(W_y·h + b_y)` over
/// the rows of `x_seq`. Row `t` of the outputs is the state after consuming
/// input `t`.
pub fn rnn_cell_forward(p: &RnnCellParams, x_seq: &Matrix, h0: Option<&[f64]>) -> Result<(Matrix, Matrix)> {
    p.check()?;
    let hidden = p.w_h.rows();
    if x_seq.cols() != p.w_x.cols() {
        return Err(shape_err(format!("input width {} but w_x expects {}", x_seq.cols(), p.w_x.cols())));
    }
    let mut h = match h0 {
        Some(h0) if h0.len() != hidden => {
            return Err(shape_err(format!("h0 has {} entries, hidden size is {hidden}", h0.len())))
        }
        Some(h0) => h0.to_vec(),
        None => vec![0.0; hidden],
    };
    let mut hs = Matrix::zeros(x_seq.rows(), hidden);
    let mut ys = Matrix::zeros(x_seq.rows(), p.w_y.rows());
    let mut z = vec![0.0; hidden];
    for t in 0..x_seq.rows() {
        z.copy_from_slice(&p.b_h);
        p.w_x.mul_vec_acc(x_seq.row(t), &mut z);
        p.w_h.mul_vec_acc(&h, &mut z);
        for (hv, zv) in h.iter_mut().zip(&z) {
            *hv = p.activation.apply(*zv);
        }
        hs.row_mut(t).copy_from_slice(&h);
        let y = ys.row_mut(t);
        y.copy_from_slice(&p.b_y);
        p.w_y.mul_vec_acc(&h, y);
        y.iter_mut().for_each(|v| *v = p.activation.apply(*v));
    }
    Ok((hs, ys))
}
