//! Sequence-to-one classifiers: a stack of masked LSTM blocks or transformer
//! encoder blocks, a pooling step and a sigmoid dense head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::seqnet::attention::{EncoderBlock, EncoderCache, MultiHeadAttention};
use crate::seqnet::layers::{
    check_dropout_rate, dropout_backward, dropout_in_place, Activation, Dense, DropoutMask, LayerNorm,
    LayerNormCache, DEFAULT_LAYER_NORM_EPS,
};
use crate::seqnet::lstm::{compact, valid_steps, Gate, LstmLayer, LstmSeqCache};
use crate::tensor::{MaskMatrix, Matrix, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Output at the last valid step.
    LastUnmasked,
    /// Mean over valid steps.
    MaskedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmBlockSpec {
    pub hidden: usize,
    #[serde(default = "yes")]
    pub layer_norm: bool,
    #[serde(default)]
    pub dropout: f64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Blocks of LSTM → optional layer norm → dropout.
    LstmStack { blocks: Vec<LstmBlockSpec> },
    /// Post-norm encoder blocks operating at the input width.
    TransformerEncoder { blocks: usize, heads: usize, key_dim: usize, ff_dim: usize, dropout: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_width: usize,
    pub architecture: Architecture,
    pub pooling: Pooling,
    /// Dropout applied to the pooled vector before the dense head.
    #[serde(default)]
    pub head_dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_forget_bias")]
    pub forget_bias: f64,
}

fn default_eps() -> f64 {
    DEFAULT_LAYER_NORM_EPS
}

fn default_forget_bias() -> f64 {
    1.0
}

pub const DEFAULT_DROPOUT: f64 = 0.2;

impl ModelConfig {
    /// `blocks` identical LSTM blocks with layer norm, pooled at the last valid step.
    pub fn lstm(input_width: usize, blocks: usize, hidden: usize, dropout: f64) -> Self {
        Self {
            input_width,
            architecture: Architecture::LstmStack {
                blocks: vec![LstmBlockSpec { hidden, layer_norm: true, dropout }; blocks],
            },
            pooling: Pooling::LastUnmasked,
            head_dropout: 0.0,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            forget_bias: 1.0,
        }
    }

    /// Encoder stack with masked-mean pooling and dropout before the head.
    pub fn transformer(input_width: usize, blocks: usize, heads: usize, key_dim: usize, ff_dim: usize, dropout: f64) -> Self {
        Self {
            input_width,
            architecture: Architecture::TransformerEncoder { blocks, heads, key_dim, ff_dim, dropout },
            pooling: Pooling::MaskedMean,
            head_dropout: dropout,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            forget_bias: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_width == 0 {
            return bad("input width must be positive".into());
        }
        check_dropout_rate(self.head_dropout)?;
        if !(self.layer_norm_eps >= 0.0) {
            return bad(format!("layer norm epsilon must be non-negative, got {}", self.layer_norm_eps));
        }
        match &self.architecture {
            Architecture::LstmStack { blocks } => {
                if blocks.is_empty() {
                    return bad("an LSTM stack needs at least one block".into());
                }
                for b in blocks {
                    if b.hidden == 0 {
                        return bad("LSTM hidden size must be positive".into());
                    }
                    check_dropout_rate(b.dropout)?;
                }
            }
            Architecture::TransformerEncoder { blocks, heads, key_dim, ff_dim, dropout } => {
                if *blocks == 0 || *heads == 0 || *key_dim == 0 || *ff_dim == 0 {
                    return bad(format!(
                        "transformer sizes must be positive (blocks {blocks}, heads {heads}, key_dim {key_dim}, ff_dim {ff_dim})"
                    ));
                }
                check_dropout_rate(*dropout)?;
            }
        }
        Ok(())
    }

    /// Width of the pooled representation fed to the head.
    pub fn output_width(&self) -> usize {
        match &self.architecture {
            Architecture::LstmStack { blocks } => blocks.last().map_or(self.input_width, |b| b.hidden),
            Architecture::TransformerEncoder { .. } => self.input_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmBlock {
    pub lstm: LstmLayer,
    pub norm: Option<LayerNorm>,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Lstm(Vec<LstmBlock>),
    Transformer { blocks: Vec<EncoderBlock>, dropout: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub body: Body,
    pub head: Dense,
}


fn glorot<R: Rng>(m: &mut Matrix, fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in m.values_mut() {
        *v = rng.random_range(-limit..limit);
    }
}

impl ModelParams {
    /// All-zero parameters (unit layer-norm gains) for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let eps = config.layer_norm_eps;
        let body = match &config.architecture {
            Architecture::LstmStack { blocks } => {
                let mut input = config.input_width;
                let mut out = Vec::with_capacity(blocks.len());
                for b in blocks {
                    out.push(LstmBlock {
                        lstm: LstmLayer::zeros(input, b.hidden),
                        norm: b.layer_norm.then(|| LayerNorm::new(b.hidden, eps)),
                        dropout: b.dropout,
                    });
                    input = b.hidden;
                }
                Body::Lstm(out)
            }
            Architecture::TransformerEncoder { blocks, heads, key_dim, ff_dim, dropout } => {
                let w = config.input_width;
                Body::Transformer {
                    blocks: (0..*blocks)
                        .map(|_| EncoderBlock {
                            attention: MultiHeadAttention::zeros(w, *heads, *key_dim),
                            ff_expand: Dense::zeros(w, *ff_dim, Activation::Relu),
                            ff_contract: Dense::zeros(*ff_dim, w, Activation::Identity),
                            norm1: LayerNorm::new(w, eps),
                            norm2: LayerNorm::new(w, eps),
                        })
                        .collect(),
                    dropout: *dropout,
                }
            }
        };
        Ok(Self { config: config.clone(), body, head: Dense::zeros(config.output_width(), 1, Activation::Sigmoid) })
    }

    /// Glorot-uniform weights, zero biases, forget-gate bias from the config.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &mut p.body {
            Body::Lstm(blocks) => {
                for b in blocks {
                    let (input, hidden) = (b.lstm.input(), b.lstm.hidden());
                    glorot(&mut b.lstm.w_x, input, 4 * hidden, &mut rng);
                    glorot(&mut b.lstm.w_h, hidden, 4 * hidden, &mut rng);
                    b.lstm.gate_bias_mut(Gate::Forget).iter_mut().for_each(|v| *v = config.forget_bias);
                }
            }
            Body::Transformer { blocks, .. } => {
                for b in blocks {
                    let a = &mut b.attention;
                    let (w, dk) = (a.model_width(), a.key_dim());
                    for h in 0..a.heads() {
                        glorot(&mut a.w_q[h], w, dk, &mut rng);
                        glorot(&mut a.w_k[h], w, dk, &mut rng);
                        glorot(&mut a.w_v[h], w, dk, &mut rng);
                    }
                    let concat = a.heads() * dk;
                    glorot(&mut a.w_o, concat, w, &mut rng);
                    let (i, o) = (b.ff_expand.input(), b.ff_expand.output());
                    glorot(&mut b.ff_expand.weight, i, o, &mut rng);
                    glorot(&mut b.ff_contract.weight, o, i, &mut rng);
                }
            }
        }
        let (i, o) = (p.head.input(), p.head.output());
        glorot(&mut p.head.weight, i, o, &mut rng);
        Ok(p)
    }

    /// Every parameter tensor with a stable name, in a fixed order shared
    /// with [`ModelParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        fn m<'a>(out: &mut Vec<(String, (usize, usize), &'a [f64])>, name: String, x: &'a Matrix) {
            out.push((name, x.shape(), x.values()));
        }
        fn v<'a>(out: &mut Vec<(String, (usize, usize), &'a [f64])>, name: String, x: &'a [f64]) {
            out.push((name, (1, x.len()), x));
        }
        let mut out = Vec::new();
        match &self.body {
            Body::Lstm(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    m(&mut out, format!("lstm{i}.w_x"), &b.lstm.w_x);
                    m(&mut out, format!("lstm{i}.w_h"), &b.lstm.w_h);
                    v(&mut out, format!("lstm{i}.bias"), &b.lstm.bias);
                    if let Some(n) = &b.norm {
                        v(&mut out, format!("lstm{i}.norm.gain"), &n.gain);
                        v(&mut out, format!("lstm{i}.norm.bias"), &n.bias);
                    }
                }
            }
            Body::Transformer { blocks, .. } => {
                for (i, b) in blocks.iter().enumerate() {
                    let a = &b.attention;
                    for h in 0..a.heads() {
                        m(&mut out, format!("encoder{i}.attn.w_q{h}"), &a.w_q[h]);
                        v(&mut out, format!("encoder{i}.attn.b_q{h}"), &a.b_q[h]);
                        m(&mut out, format!("encoder{i}.attn.w_k{h}"), &a.w_k[h]);
                        m(&mut out, format!("encoder{i}.attn.w_v{h}"), &a.w_v[h]);
                        v(&mut out, format!("encoder{i}.attn.b_v{h}"), &a.b_v[h]);
                    }
                    m(&mut out, format!("encoder{i}.attn.w_o"), &a.w_o);
                    v(&mut out, format!("encoder{i}.attn.b_o"), &a.b_o);
                    m(&mut out, format!("encoder{i}.ff_expand.weight"), &b.ff_expand.weight);
                    v(&mut out, format!("encoder{i}.ff_expand.bias"), &b.ff_expand.bias);
                    m(&mut out, format!("encoder{i}.ff_contract.weight"), &b.ff_contract.weight);
                    v(&mut out, format!("encoder{i}.ff_contract.bias"), &b.ff_contract.bias);
                    v(&mut out, format!("encoder{i}.norm1.gain"), &b.norm1.gain);
                    v(&mut out, format!("encoder{i}.norm1.bias"), &b.norm1.bias);
                    v(&mut out, format!("encoder{i}.norm2.gain"), &b.norm2.gain);
                    v(&mut out, format!("encoder{i}.norm2.bias"), &b.norm2.bias);
                }
            }
        }
        m(&mut out, "head.weight".into(), &self.head.weight);
        v(&mut out, "head.bias".into(), &self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.body {
            Body::Lstm(blocks) => {
                for b in blocks.iter_mut() {
                    out.push(b.lstm.w_x.values_mut());
                    out.push(b.lstm.w_h.values_mut());
                    out.push(&mut b.lstm.bias);
                    if let Some(n) = &mut b.norm {
                        out.push(&mut n.gain);
                        out.push(&mut n.bias);
                    }
                }
            }
            Body::Transformer { blocks, .. } => {
                for b in blocks.iter_mut() {
                    let a = &mut b.attention;
                    for ((((wq, bq), wk), wv), bv) in
                        a.w_q.iter_mut().zip(a.b_q.iter_mut()).zip(a.w_k.iter_mut()).zip(a.w_v.iter_mut()).zip(a.b_v.iter_mut())
                    {
                        out.push(wq.values_mut());
                        out.push(bq);
                        out.push(wk.values_mut());
                        out.push(wv.values_mut());
                        out.push(bv);
                    }
                    out.push(a.w_o.values_mut());
                    out.push(&mut a.b_o);
                    out.push(b.ff_expand.weight.values_mut());
                    out.push(&mut b.ff_expand.bias);
                    out.push(b.ff_contract.weight.values_mut());
                    out.push(&mut b.ff_contract.bias);
                    out.push(&mut b.norm1.gain);
                    out.push(&mut b.norm1.bias);
                    out.push(&mut b.norm2.gain);
                    out.push(&mut b.norm2.bias);
                }
            }
        }
        out.push(self.head.weight.values_mut());
        out.push(&mut self.head.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// Copy with every parameter set to zero, used as a gradient buffer.
    pub fn zeroed(&self) -> Self {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    /// FNV-1a over the config and every parameter's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (_, (r, c), vals) in self.tensors() {
            eat(r as u64);
            eat(c as u64);
            vals.iter().for_each(|v| eat(v.to_bits()));
        }
        eat(self.config.input_width as u64);
        eat(self.config.head_dropout.to_bits());
        eat(match self.config.pooling {
            Pooling::LastUnmasked => 1,
            Pooling::MaskedMean => 2,
        });
        h
    }
}

/// Parameter gradients, laid out exactly like the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Gradients {
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        self.0.tensors()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn get(&self, name: &str) -> Option<Vec<f64>> {
        self.tensors().into_iter().find(|t| t.0 == name).map(|t| t.2.to_vec())
    }
}

#[derive(Debug, Clone)]
enum BlockCache {
    Lstm { lstm: LstmSeqCache, norm: Option<LayerNormCache>, drop: DropoutMask },
    Encoder(EncoderCache),
}

#[derive(Debug, Clone)]
struct SampleCache {
    valid: usize,
    blocks: Vec<BlockCache>,
    head_in: Matrix,
    head_drop: DropoutMask,
    prob: Matrix,
}

/// Everything [`model_backward`] needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    shape: [usize; 3],
    samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn batch_shape(&self) -> [usize; 3] {
        self.shape
    }
}

impl ModelParams {
    fn forward_sample<R: Rng + ?Sized>(&self, x: Matrix, training: bool, rng: &mut R) -> (f64, SampleCache) {
        let n = x.rows();
        let mut h = x;
        let mut blocks = Vec::new();
        match &self.body {
            Body::Lstm(layers) => {
                for b in layers {
                    let hdim = b.lstm.hidden();
                    let zeros = vec![0.0; hdim];
                    let (out, _, _, lstm) = b.lstm.forward_seq(&h, &zeros, &zeros);
                    let (mut out, norm) = match &b.norm {
                        Some(ln) => {
                            let (y, c) = ln.forward(&out);
                            (y, Some(c))
                        }
                        None => (out, None),
                    };
                    let drop = dropout_in_place(b.dropout, training, rng, out.values_mut());
                    blocks.push(BlockCache::Lstm { lstm, norm, drop });
                    h = out;
                }
            }
            Body::Transformer { blocks: layers, dropout } => {
                for b in layers {
                    let (y, c) = b.forward_seq(&h, *dropout, training, rng);
                    blocks.push(BlockCache::Encoder(c));
                    h = y;
                }
            }
        }
        let width = self.config.output_width();
        let mut pooled = vec![0.0; width];
        if n > 0 {
            match self.config.pooling {
                Pooling::LastUnmasked => pooled.copy_from_slice(h.row(n - 1)),
                Pooling::MaskedMean => {
                    for r in 0..n {
                        for (p, v) in pooled.iter_mut().zip(h.row(r)) {
                            *p += v;
                        }
                    }
                    pooled.iter_mut().for_each(|p| *p /= n as f64);
                }
            }
        }
        let head_drop = dropout_in_place(self.config.head_dropout, training, rng, &mut pooled);
        let head_in = Matrix::from_vec(1, width, pooled).expect("sized");
        let prob = self.head.forward(&head_in);
        (prob.get(0, 0), SampleCache { valid: n, blocks, head_in, head_drop, prob })
    }

    fn backward_sample(&self, cache: &SampleCache, d_prob: f64, grad: &mut ModelParams) {
        let d_head = Matrix::from_vec(1, 1, vec![d_prob]).expect("sized");
        let mut d_pooled = self.head.backward(&cache.head_in, &cache.prob, &d_head, &mut grad.head).into_values();
        dropout_backward(&cache.head_drop, &mut d_pooled);
        let n = cache.valid;
        if n == 0 {
            return;
        }
        let width = self.config.output_width();
        let mut d = Matrix::zeros(n, width);
        match self.config.pooling {
            Pooling::LastUnmasked => d.row_mut(n - 1).copy_from_slice(&d_pooled),
            Pooling::MaskedMean => {
                for r in 0..n {
                    for (dv, p) in d.row_mut(r).iter_mut().zip(&d_pooled) {
                        *dv = p / n as f64;
                    }
                }
            }
        }
        match (&self.body, &mut grad.body) {
            (Body::Lstm(layers), Body::Lstm(grads)) => {
                for ((b, g), c) in layers.iter().zip(grads.iter_mut()).zip(&cache.blocks).rev() {
                    let BlockCache::Lstm { lstm, norm, drop } = c else { unreachable!("cache built by this model") };
                    dropout_backward(drop, d.values_mut());
                    if let (Some(ln), Some(lc), Some(lg)) = (&b.norm, norm, &mut g.norm) {
                        d = ln.backward(lc, &d, lg);
                    }
                    d = b.lstm.backward_seq(lstm, &d, &mut g.lstm);
                }
            }
            (Body::Transformer { blocks: layers, .. }, Body::Transformer { blocks: grads, .. }) => {
                for ((b, g), c) in layers.iter().zip(grads.iter_mut()).zip(&cache.blocks).rev() {
                    let BlockCache::Encoder(ec) = c else { unreachable!("cache built by this model") };
                    d = b.backward_seq(ec, &d, g);
                }
            }
            _ => unreachable!("gradient buffer mirrors the model"),
        }
    }
}

/// Scores every sample of `batch`. Masked steps are dropped before the
/// first block, so their feature values never reach the arithmetic.
pub fn model_forward<R: Rng + ?Sized>(
    m: &ModelParams,
    batch: &Tensor3,
    mask: &MaskMatrix,
    training: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, ForwardCache)> {
    mask.check_matches(batch)?;
    if batch.feature() != m.config.input_width {
        return Err(shape_err(format!(
            "model expects {} input features, batch has {}",
            m.config.input_width,
            batch.feature()
        )));
    }
    let mut probs = Vec::with_capacity(batch.batch());
    let mut samples = Vec::with_capacity(batch.batch());
    for b in 0..batch.batch() {
        let steps = valid_steps(mask, b);
        let (p, cache) = m.forward_sample(compact(batch, b, &steps), training, rng);
        probs.push(p);
        samples.push(cache);
    }
    Ok((probs, ForwardCache { fingerprint: m.fingerprint(), shape: batch.shape(), samples }))
}

/// Evaluation-mode scores without keeping the cache around.
pub fn predict(m: &ModelParams, batch: &Tensor3, mask: &MaskMatrix) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model_forward(m, batch, mask, false, &mut rng).map(|(p, _)| p)
}

/// Reverse pass. `upstream[b]` is `dL/dp` for sample `b`.
pub fn model_backward(m: &ModelParams, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients> {
    if cache.fingerprint != m.fingerprint() {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    if upstream.len() != cache.samples.len() {
        return Err(Error::StaleCache(format!(
            "{} upstream gradients for a batch of {}",
            upstream.len(),
            cache.samples.len()
        )));
    }
    let mut grad = m.zeroed();
    for (s, &d) in cache.samples.iter().zip(upstream) {
        if d != 0.0 {
            m.backward_sample(s, d, &mut grad);
        }
    }
    Ok(Gradients(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, t: usize, f: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(b, t, f, (0..b * t * f).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn models(width: usize) -> Vec<ModelParams> {
        vec![
            ModelParams::init(&ModelConfig::lstm(width, 2, 6, 0.2), 1).unwrap(),
            ModelParams::init(&ModelConfig::transformer(width, 2, 2, 3, 7, 0.2), 2).unwrap(),
        ]
    }

    #[test]
    fn outputs_are_probabilities() {
        let x = batch(5, 6, 4, 0);
        let mask = MaskMatrix::left_padded(6, &[6, 3, 1, 0, 5]);
        for m in models(4) {
            let p = predict(&m, &x, &mask).unwrap();
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{p:?}");
        }
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let one = batch(1, 5, 3, 4);
        let mut values = one.values().to_vec();
        values.extend_from_slice(one.values());
        let two = Tensor3::from_vec(2, 5, 3, values).unwrap();
        for m in models(3) {
            let p = predict(&m, &two, &MaskMatrix::left_padded(5, &[4, 4])).unwrap();
            assert_eq!(p[0], p[1]);
        }
    }

    #[test]
    fn masked_perturbation_is_invisible_in_training_mode_too() {
        let mask = MaskMatrix::left_padded(6, &[2, 6, 4]);
        let x = batch(3, 6, 4, 5);
        let mut y = x.clone();
        for b in 0..3 {
            for t in 0..6 {
                if !mask.is_valid(b, t) {
                    y.step_mut(b, t).iter_mut().for_each(|v| *v = f64::NAN);
                }
            }
        }
        for m in models(4) {
            let pa = model_forward(&m, &x, &mask, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
            let pb = model_forward(&m, &y, &mask, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = &models(4)[0];
        let err = predict(m, &batch(1, 3, 5, 0), &MaskMatrix::all_valid(1, 3)).unwrap_err();
        assert!(err.to_string().contains('4') && err.to_string().contains('5'));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = batch(3, 4, 3, 1);
        let mask = MaskMatrix::left_padded(4, &[4, 2, 3]);
        for m in models(3) {
            let (_, cache) = model_forward(&m, &x, &mask, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let g = model_backward(&m, &cache, &[0.0; 3]).unwrap();
            assert!(g.flat().iter().all(|&v| v == 0.0));
            assert_eq!(g.flat().len(), m.parameter_count());
        }
    }

    #[test]
    fn stale_cache_is_detected() {
        let x = batch(2, 4, 3, 1);
        let mask = MaskMatrix::all_valid(2, 4);
        let mut m = models(3).remove(0);
        let (_, cache) = model_forward(&m, &x, &mask, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(model_backward(&m, &cache, &[1.0]), Err(Error::StaleCache(_))));
        m.head.bias[0] += 0.5;
        assert!(matches!(model_backward(&m, &cache, &[1.0, 1.0]), Err(Error::StaleCache(_))));
    }

    #[test]
    fn disabled_layer_norm_has_no_gradient_entry() {
        let mut cfg = ModelConfig::lstm(3, 2, 4, 0.0);
        if let Architecture::LstmStack { blocks } = &mut cfg.architecture {
            blocks[1].layer_norm = false;
        }
        let m = ModelParams::init(&cfg, 0).unwrap();
        let x = batch(1, 3, 3, 2);
        let (_, cache) = model_forward(&m, &x, &MaskMatrix::all_valid(1, 3), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = model_backward(&m, &cache, &[1.0]).unwrap();
        assert!(g.get("lstm0.norm.gain").is_some());
        assert!(g.get("lstm1.norm.gain").is_none());
    }

    #[test]
    fn init_is_seeded_and_forget_bias_set() {
        let cfg = ModelConfig::lstm(3, 1, 4, 0.0);
        let a = ModelParams::init(&cfg, 5).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 5).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 6).unwrap());
        let Body::Lstm(blocks) = &a.body else { panic!() };
        assert_eq!(&blocks[0].lstm.bias[4..8], &[1.0; 4]);
        assert_eq!(&blocks[0].lstm.bias[0..4], &[0.0; 4]);
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelParams::zeros(&ModelConfig::lstm(0, 1, 4, 0.0)).is_err());
        assert!(ModelParams::zeros(&ModelConfig::lstm(3, 0, 4, 0.0)).is_err());
        assert!(ModelParams::zeros(&ModelConfig::lstm(3, 1, 4, 1.0)).is_err());
        assert!(ModelParams::zeros(&ModelConfig::transformer(3, 1, 0, 4, 4, 0.1)).is_err());
    }

    #[test]
    fn tensor_lists_agree() {
        for mut m in models(3) {
            let shapes: Vec<usize> = m.tensors().iter().map(|t| t.2.len()).collect();
            let muts: Vec<usize> = m.tensors_mut().iter().map(|t| t.len()).collect();
            assert_eq!(shapes, muts);
            for (_, (r, c), v) in m.tensors() {
                assert_eq!(r * c, v.len());
            }
        }
    }
}
