//! Central finite-difference check of [`model_backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::LossKind;
use crate::seqnet::model::{model_backward, model_forward, ModelParams};
use crate::tensor::{MaskMatrix, Tensor3};

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOMINATOR_FLOOR: f64 = 1e-8;

fn batch_loss(m: &ModelParams, x: &Tensor3, mask: &MaskMatrix, labels: &[u8], loss: &LossKind) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (p, _) = model_forward(m, x, mask, false, &mut rng)?;
    Ok(loss.evaluate(&p, labels)?.0)
}

/// A small random batch with varied left padding and alternating labels,
/// sized for finite-difference checks.
pub fn random_problem(seed: u64, batch: usize, time: usize, width: usize) -> (Tensor3, MaskMatrix, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..batch * time * width).map(|_| rng.random_range(-1.5..1.5)).collect();
    let x = Tensor3::from_vec(batch, time, width, values).expect("sized");
    let valid: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=time)).collect();
    let labels = (0..batch).map(|b| u8::from(b % 3 == 0)).collect();
    (x, MaskMatrix::left_padded(time, &valid), labels)
}

/// Max over all parameters of `|a − n| / max(|a|, |n|, 1e-8)` where `a` is
/// the analytic and `n` the central-difference gradient. Runs in
/// evaluation mode so dropout is off.
pub fn grad_check(
    m: &ModelParams,
    x: &Tensor3,
    mask: &MaskMatrix,
    labels: &[u8],
    loss: &LossKind,
    h: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (p, cache) = model_forward(m, x, mask, false, &mut rng)?;
    let (_, dp) = loss.evaluate(&p, labels)?;
    let analytic = model_backward(m, &cache, &dp)?.flat();

    let mut probe = m.clone();
    let sizes: Vec<usize> = probe.tensors_mut().iter().map(|t| t.len()).collect();
    let mut worst = 0.0f64;
    let mut k = 0;
    for (ti, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.tensors_mut()[ti][j];
            probe.tensors_mut()[ti][j] = orig + h;
            let up = batch_loss(&probe, x, mask, labels, loss)?;
            probe.tensors_mut()[ti][j] = orig - h;
            let down = batch_loss(&probe, x, mask, labels, loss)?;
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let denom = a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
            k += 1;
        }
    }
    Ok(worst)
}
