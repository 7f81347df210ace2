//! Multi-head self-attention and the post-norm transformer encoder block.
//!
//! Like the LSTM, both operate on compacted sequences: masked steps are
//! removed before attention, which is equivalent to giving masked keys a
//! score of −∞ and zeroing masked queries.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::seqnet::layers::{dropout_backward, dropout_in_place, Dense, DropoutMask, LayerNorm, LayerNormCache};
use crate::seqnet::lstm::{compact, scatter, valid_steps};
use crate::tensor::{matmul, softmax_in_place, MaskMatrix, Matrix, Tensor3};

/// Per-head projections are stored `model_width × key_dim` so that
/// `Q = X·W_q + b_q`; the output projection is `(heads·key_dim) × model_width`.
/// Keys carry no bias: it would add a per-query constant to every score
/// and cancel in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub w_q: Vec<Matrix>,
    pub b_q: Vec<Vec<f64>>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub b_v: Vec<Vec<f64>>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    x: Matrix,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    /// attention weights per head, `n × n`, each row a probability vector
    pub weights: Vec<Matrix>,
    concat: Matrix,
}

fn add_row_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sums_into(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

fn add_assign(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
        *d += s;
    }
}

impl MultiHeadAttention {
    pub fn zeros(model_width: usize, heads: usize, key_dim: usize) -> Self {
        let proj = || vec![Matrix::zeros(model_width, key_dim); heads];
        let bias = || vec![vec![0.0; key_dim]; heads];
        Self {
            w_q: proj(),
            b_q: bias(),
            w_k: proj(),
            w_v: proj(),
            b_v: bias(),
            w_o: Matrix::zeros(heads * key_dim, model_width),
            b_o: vec![0.0; model_width],
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::cols)
    }

    pub fn model_width(&self) -> usize {
        self.w_o.cols()
    }

    pub fn forward_seq(&self, x: &Matrix) -> (Matrix, MhaCache) {
        let n = x.rows();
        let dk = self.key_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut concat = Matrix::zeros(n, self.heads() * dk);
        let (mut qs, mut ks, mut vs, mut ws) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for h in 0..self.heads() {
            let project = |w: &Matrix, b: &[f64]| {
                let mut m = matmul(x, w).expect("projection shapes");
                add_row_bias(&mut m, b);
                m
            };
            let q = project(&self.w_q[h], &self.b_q[h]);
            let k = matmul(x, &self.w_k[h]).expect("projection shapes");
            let v = project(&self.w_v[h], &self.b_v[h]);
            let mut scores = matmul(&q, &k.transpose()).expect("score shapes");
            for r in 0..n {
                let row = scores.row_mut(r);
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            let o = matmul(&scores, &v).expect("value shapes");
            for r in 0..n {
                concat.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(o.row(r));
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
            ws.push(scores);
        }
        let mut y = matmul(&concat, &self.w_o).expect("output projection shapes");
        add_row_bias(&mut y, &self.b_o);
        (y, MhaCache { x: x.clone(), q: qs, k: ks, v: vs, weights: ws, concat })
    }

    pub fn backward_seq(&self, cache: &MhaCache, dy: &Matrix, grad: &mut MultiHeadAttention) -> Matrix {
        let n = dy.rows();
        let dk = self.key_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        add_assign(&mut grad.w_o, &matmul(&cache.concat.transpose(), dy).expect("shapes"));
        col_sums_into(dy, &mut grad.b_o);
        let d_concat = matmul(dy, &self.w_o.transpose()).expect("shapes");
        let xt = cache.x.transpose();
        let mut dx = Matrix::zeros(n, cache.x.cols());
        for h in 0..self.heads() {
            let mut d_o = Matrix::zeros(n, dk);
            for r in 0..n {
                d_o.row_mut(r).copy_from_slice(&d_concat.row(r)[h * dk..(h + 1) * dk]);
            }
            let a = &cache.weights[h];
            let d_a = matmul(&d_o, &cache.v[h].transpose()).expect("shapes");
            let d_v = matmul(&a.transpose(), &d_o).expect("shapes");
            let mut d_s = Matrix::zeros(n, n);
            for r in 0..n {
                let dot: f64 = a.row(r).iter().zip(d_a.row(r)).map(|(p, g)| p * g).sum();
                for (c, ds) in d_s.row_mut(r).iter_mut().enumerate() {
                    *ds = a.get(r, c) * (d_a.get(r, c) - dot) * scale;
                }
            }
            let d_q = matmul(&d_s, &cache.k[h]).expect("shapes");
            let d_k = matmul(&d_s.transpose(), &cache.q[h]).expect("shapes");
            let mut accumulate = |w: &Matrix, gw: &mut Matrix, gb: Option<&mut [f64]>, d: &Matrix| {
                add_assign(gw, &matmul(&xt, d).expect("shapes"));
                if let Some(gb) = gb {
                    col_sums_into(d, gb);
                }
                add_assign(&mut dx, &matmul(d, &w.transpose()).expect("shapes"));
            };
            accumulate(&self.w_q[h], &mut grad.w_q[h], Some(&mut grad.b_q[h]), &d_q);
            accumulate(&self.w_k[h], &mut grad.w_k[h], None, &d_k);
            accumulate(&self.w_v[h], &mut grad.w_v[h], Some(&mut grad.b_v[h]), &d_v);
        }
        dx
    }
}

/// Applies attention per sample over valid steps only; masked query rows
/// of the result are zero. Returns the output and per-sample caches.
pub fn mha_forward(p: &MultiHeadAttention, x: &Tensor3, mask: &MaskMatrix) -> Result<(Tensor3, Vec<MhaCache>)> {
    mask.check_matches(x)?;
    if x.feature() != p.model_width() {
        return Err(shape_err(format!("attention expects width {}, got {}", p.model_width(), x.feature())));
    }
    let mut out = Tensor3::zeros(x.batch(), x.time(), x.feature());
    let mut caches = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let steps = valid_steps(mask, b);
        let (y, cache) = p.forward_seq(&compact(x, b, &steps));
        scatter(&mut out, b, &steps, &y);
        caches.push(cache);
    }
    Ok((out, caches))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    /// width → ff_dim, relu
    pub ff_expand: Dense,
    /// ff_dim → width, identity
    pub ff_contract: Dense,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    mha: MhaCache,
    attn_drop: DropoutMask,
    norm1: LayerNormCache,
    y1: Matrix,
    f1: Matrix,
    f2: Matrix,
    ff_drop: DropoutMask,
    norm2: LayerNormCache,
}

impl EncoderBlock {
    pub fn width(&self) -> usize {
        self.attention.model_width()
    }

    /// `y₁ = LN(x + drop(mha(x)))`, `y₂ = LN(y₁ + drop(ff(y₁)))`.
    pub fn forward_seq<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> (Matrix, EncoderCache) {
        let (mut a, mha) = self.attention.forward_seq(x);
        let attn_drop = dropout_in_place(dropout, training, rng, a.values_mut());
        add_assign(&mut a, x);
        let (y1, norm1) = self.norm1.forward(&a);
        let f1 = self.ff_expand.forward(&y1);
        let f2 = self.ff_contract.forward(&f1);
        let mut r2 = f2.clone();
        let ff_drop = dropout_in_place(dropout, training, rng, r2.values_mut());
        add_assign(&mut r2, &y1);
        let (y2, norm2) = self.norm2.forward(&r2);
        (y2, EncoderCache { mha, attn_drop, norm1, y1, f1, f2, ff_drop, norm2 })
    }

    pub fn backward_seq(&self, cache: &EncoderCache, dy: &Matrix, grad: &mut EncoderBlock) -> Matrix {
        let dr2 = self.norm2.backward(&cache.norm2, dy, &mut grad.norm2);
        let mut df2 = dr2.clone();
        dropout_backward(&cache.ff_drop, df2.values_mut());
        let df1 = self.ff_contract.backward(&cache.f1, &cache.f2, &df2, &mut grad.ff_contract);
        let mut dy1 = self.ff_expand.backward(&cache.y1, &cache.f1, &df1, &mut grad.ff_expand);
        add_assign(&mut dy1, &dr2);
        let dr1 = self.norm1.backward(&cache.norm1, &dy1, &mut grad.norm1);
        let mut da = dr1.clone();
        dropout_backward(&cache.attn_drop, da.values_mut());
        let mut dx = self.attention.backward_seq(&cache.mha, &da, &mut grad.attention);
        add_assign(&mut dx, &dr1);
        dx
    }
}

pub fn encoder_block_forward<R: Rng + ?Sized>(
    p: &EncoderBlock,
    x: &Tensor3,
    mask: &MaskMatrix,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor3, Vec<EncoderCache>)> {
    mask.check_matches(x)?;
    if x.feature() != p.width() {
        return Err(shape_err(format!("encoder block expects width {}, got {}", p.width(), x.feature())));
    }
    let mut out = Tensor3::zeros(x.batch(), x.time(), x.feature());
    let mut caches = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let steps = valid_steps(mask, b);
        let (y, cache) = p.forward_seq(&compact(x, b, &steps), dropout, training, rng);
        scatter(&mut out, b, &steps, &y);
        caches.push(cache);
    }
    Ok((out, caches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqnet::layers::{Activation, DEFAULT_LAYER_NORM_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mha(width: usize, heads: usize, dk: usize, seed: u64) -> MultiHeadAttention {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MultiHeadAttention::zeros(width, heads, dk);
        let fill = |v: &mut [f64], rng: &mut ChaCha8Rng| v.iter_mut().for_each(|x| *x = rng.random_range(-0.6..0.6));
        for h in 0..heads {
            for w in [&mut m.w_q[h], &mut m.w_k[h], &mut m.w_v[h]] {
                fill(w.values_mut(), &mut rng);
            }
            for b in [&mut m.b_q[h], &mut m.b_v[h]] {
                fill(b, &mut rng);
            }
        }
        fill(m.w_o.values_mut(), &mut rng);
        fill(&mut m.b_o, &mut rng);
        m
    }

    #[test]
    fn identical_keys_give_uniform_weights_and_value_mean() {
        let mut m = random_mha(3, 1, 2, 1);
        // zero key projection: every key equals the bias, so scores tie
        m.w_k[0] = Matrix::zeros(3, 2);
        let x = Tensor3::from_vec(1, 4, 3, (0..12).map(|v| v as f64 * 0.3).collect()).unwrap();
        let mask = MaskMatrix::left_padded(4, &[3]);
        let (y, caches) = mha_forward(&m, &x, &mask).unwrap();
        let w = &caches[0].weights[0];
        for r in 0..3 {
            for c in 0..3 {
                assert!((w.get(r, c) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        // output row = projected mean value, same for every valid query
        assert_eq!(y.step(0, 1), y.step(0, 2));
        assert!(y.step(0, 0).iter().all(|&v| v == 0.0));
        let xs = compact(&x, 0, &[1, 2, 3]);
        let mut v = matmul(&xs, &m.w_v[0]).unwrap();
        add_row_bias(&mut v, &m.b_v[0]);
        let mean: Vec<f64> = (0..2).map(|c| (0..3).map(|r| v.get(r, c)).sum::<f64>() / 3.0).collect();
        let mut expected = m.b_o.clone();
        m.w_o.tr_mul_vec_acc(&mean, &mut expected);
        for (a, b) in y.step(0, 3).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_valid_step_returns_its_projected_value() {
        let m = random_mha(3, 2, 2, 2);
        let x = Tensor3::from_vec(1, 3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        let (y, caches) = mha_forward(&m, &x, &MaskMatrix::left_padded(3, &[1])).unwrap();
        assert_eq!(caches[0].weights[0].values(), &[1.0]);
        let (alone, _) = m.forward_seq(&compact(&x, 0, &[2]));
        assert_eq!(y.step(0, 2), alone.row(0));
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let m = random_mha(4, 3, 2, 3);
        let x = Tensor3::from_vec(2, 5, 4, (0..40).map(|v| (v as f64).sin() * 3.0).collect()).unwrap();
        let (_, caches) = mha_forward(&m, &x, &MaskMatrix::left_padded(5, &[5, 2])).unwrap();
        for c in &caches {
            for w in &c.weights {
                for r in 0..w.rows() {
                    assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    assert!(w.row(r).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    fn block(width: usize, seed: u64) -> EncoderBlock {
        EncoderBlock {
            attention: random_mha(width, 2, 3, seed),
            ff_expand: Dense::zeros(width, 5, Activation::Relu),
            ff_contract: Dense::zeros(5, width, Activation::Identity),
            norm1: LayerNorm::new(width, DEFAULT_LAYER_NORM_EPS),
            norm2: LayerNorm::new(width, DEFAULT_LAYER_NORM_EPS),
        }
    }

    #[test]
    fn zero_sublayers_reduce_to_double_layer_norm() {
        let mut b = block(4, 4);
        b.attention = MultiHeadAttention::zeros(4, 2, 3);
        let x = Tensor3::from_vec(1, 3, 4, (0..12).map(|v| (v as f64 * 0.9).cos() * 2.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = encoder_block_forward(&b, &x, &MaskMatrix::all_valid(1, 3), 0.0, false, &mut rng).unwrap();
        let (once, _) = b.norm1.forward(&x.sample_matrix(0));
        let (twice, _) = b.norm2.forward(&once);
        assert_eq!(y.sample_matrix(0), twice);
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn encoder_ignores_masked_rows() {
        let b = block(4, 5);
        let mask = MaskMatrix::left_padded(4, &[2]);
        let mut x = Tensor3::from_vec(1, 4, 4, (0..16).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = encoder_block_forward(&b, &x, &mask, 0.0, false, &mut rng).unwrap();
        x.step_mut(0, 0).iter_mut().for_each(|v| *v = -77.0);
        let (c, _) = encoder_block_forward(&b, &x, &mask, 0.0, false, &mut rng).unwrap();
        assert_eq!(a, c);
        assert!(a.step(0, 0).iter().chain(a.step(0, 1)).all(|&v| v == 0.0));
    }
}
