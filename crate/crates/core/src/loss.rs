//! Class weights and the two per-sample losses, each returning the batch
//! mean together with `dL/dp` for every sample.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w0: 1.0, w1: 1.0 };

    pub fn new(w0: f64, w1: f64) -> Result<Self> {
        if !(w0 > 0.0 && w1 > 0.0 && w0.is_finite() && w1.is_finite()) {
            return Err(Error::Config(format!("class weights must be positive and finite, got w0={w0}, w1={w1}")));
        }
        Ok(Self { w0, w1 })
    }

    /// `w_c = n / (2·n_c)`.
    pub fn from_counts(n0: u64, n1: u64) -> Result<Self> {
        if n0 == 0 || n1 == 0 {
            return Err(Error::UndefinedMetric(format!(
                "class weights need both classes, got {n0} negatives and {n1} positives"
            )));
        }
        let n = (n0 + n1) as f64;
        Ok(Self { w0: n / (2.0 * n0 as f64), w1: n / (2.0 * n1 as f64) })
    }

    /// Same formulas written in terms of the positive fraction `q`.
    pub fn from_positive_fraction(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::UndefinedMetric(format!("positive fraction must be in (0, 1), got {q}")));
        }
        Ok(Self { w0: 1.0 / (2.0 * (1.0 - q)), w1: 1.0 / (2.0 * q) })
    }

    fn of(&self, y: u8) -> f64 {
        if y == 1 {
            self.w1
        } else {
            self.w0
        }
    }
}

pub fn compute_class_weights(labels: &[u8]) -> Result<ClassWeights> {
    check_labels(labels)?;
    let n1 = labels.iter().filter(|&&y| y == 1).count() as u64;
    ClassWeights::from_counts(labels.len() as u64 - n1, n1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    #[serde(default)]
    pub weights: Option<ClassWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Bce {
        #[serde(default)]
        weights: Option<ClassWeights>,
    },
    Focal(FocalConfig),
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::Bce { weights: Some(w) } | LossKind::Focal(FocalConfig { weights: Some(w), .. }) => {
                ClassWeights::new(w.w0, w.w1)?;
            }
            _ => {}
        }
        if let LossKind::Focal(f) = self {
            check_gamma(f.gamma)?;
        }
        Ok(())
    }

    /// Mean loss over the batch and the per-sample gradient of that mean.
    pub fn evaluate(&self, p: &[f64], y: &[u8]) -> Result<(f64, Vec<f64>)> {
        match self {
            LossKind::Bce { weights } => weighted_bce(p, y, &weights.unwrap_or(ClassWeights::UNIT)),
            LossKind::Focal(cfg) => focal_loss(p, y, cfg),
        }
    }
}

fn check_labels(y: &[u8]) -> Result<()> {
    match y.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Config(format!("labels must be 0 or 1, got {v}"))),
        None => Ok(()),
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("focal gamma must be non-negative, got {gamma}")));
    }
    Ok(())
}

fn check_pair(p: &[f64], y: &[u8]) -> Result<()> {
    if p.len() != y.len() {
        return Err(shape_err(format!("{} predictions for {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Empty("loss over zero samples".into()));
    }
    check_labels(y)
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `mean(−[w1·y·ln p + w0·(1−y)·ln(1−p)])`. The gradient is taken at the
/// clamped probability.
pub fn weighted_bce(p: &[f64], y: &[u8], w: &ClassWeights) -> Result<(f64, Vec<f64>)> {
    check_pair(p, y)?;
    let n = p.len() as f64;
    let mut total = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = clamp(p);
            if y == 1 {
                total -= w.w1 * pc.ln();
                -w.w1 / pc / n
            } else {
                total -= w.w0 * (1.0 - pc).ln();
                w.w0 / (1.0 - pc) / n
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// `mean(−(1−p)^γ·y·ln p − p^γ·(1−y)·ln(1−p))`, times the class weight when set.
pub fn focal_loss(p: &[f64], y: &[u8], cfg: &FocalConfig) -> Result<(f64, Vec<f64>)> {
    check_gamma(cfg.gamma)?;
    check_pair(p, y)?;
    let g = cfg.gamma;
    let w = cfg.weights.unwrap_or(ClassWeights::UNIT);
    let n = p.len() as f64;
    let mut total = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = clamp(p);
            // q is the probability assigned to the true class
            let (q, sign) = if y == 1 { (pc, 1.0) } else { (1.0 - pc, -1.0) };
            let m = (1.0 - q).powf(g);
            let lq = q.ln();
            total -= w.of(y) * m * lq;
            let dm = if g == 0.0 { 0.0 } else { g * (1.0 - q).powf(g - 1.0) };
            sign * w.of(y) * (dm * lq - m / q) / n
        })
        .collect();
    Ok((total / n, grad))
}
