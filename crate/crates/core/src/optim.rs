//! RMSProp and Adam over flat parameter slices, early stopping and
//! reduce-on-plateau scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::seqnet::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop { lr: f64, rho: f64, eps: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn rmsprop() -> Self {
        OptimizerKind::Rmsprop { lr: 1e-3, rho: 0.9, eps: 1e-8 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Rmsprop { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1), got {v}")))
            }
        };
        let (lr, eps) = match *self {
            OptimizerKind::Rmsprop { lr, rho, eps } => {
                unit("rho", rho)?;
                (lr, eps)
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                (lr, eps)
            }
        };
        if !(lr > 0.0 && lr.is_finite()) || !(eps >= 0.0) {
            return Err(Error::Config(format!("learning rate must be positive and epsilon non-negative (lr {lr}, eps {eps})")));
        }
        Ok(())
    }
}

/// Per-parameter accumulators. `s` holds the RMSProp square average or the
/// Adam second moment; `m` is Adam's first moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Current learning rate, which the plateau scheduler may lower.
    pub lr: f64,
    pub step: u64,
    s: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, lr: kind.lr(), step: 0, s: Vec::new(), m: Vec::new() })
    }

    /// One update of `params` against `grads`, tensor by tensor.
    pub fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(&grads).any(|(p, g)| p.len() != g.len()) {
            return Err(shape_err(format!(
                "gradient layout {:?} does not match parameters {:?}",
                grads.iter().map(|g| g.len()).collect::<Vec<_>>(),
                params.iter().map(|p| p.len()).collect::<Vec<_>>()
            )));
        }
        if self.s.is_empty() {
            self.s = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.m = self.s.clone();
        } else if self.s.len() != params.len() || self.s.iter().zip(&params).any(|(s, p)| s.len() != p.len()) {
            return Err(shape_err("optimizer state was built for a different parameter layout"));
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Rmsprop { rho, eps, .. } => {
                for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.s) {
                    for ((p, &g), s) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *s = rho * *s + (1.0 - rho) * g * g;
                        *p -= lr * g / (s.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), v), m) in params.into_iter().zip(grads).zip(&mut self.s).zip(&mut self.m) {
                    for (((p, &g), v), m) in p.iter_mut().zip(g).zip(v.iter_mut()).zip(m.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply_model(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let g: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.2).collect();
        self.apply(params.tensors_mut(), g)
    }
}

fn expect_kind(state: &OptimizerState, adam: bool) -> Result<()> {
    if matches!(state.kind, OptimizerKind::Adam { .. }) != adam {
        return Err(Error::Config(format!("optimizer state is {:?}", state.kind)));
    }
    Ok(())
}

pub fn rmsprop_step(state: &mut OptimizerState, grads: &Gradients, params: &mut ModelParams) -> Result<()> {
    expect_kind(state, false)?;
    state.apply_model(params, grads)
}

pub fn adam_step(state: &mut OptimizerState, grads: &Gradients, params: &mut ModelParams) -> Result<()> {
    expect_kind(state, true)?;
    state.apply_model(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue { improved: bool },
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss. The caller keeps the best weights when `improved`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience < 1 {
            return Err(Error::Config("early-stopping patience must be at least 1".into()));
        }
        Ok(Self { patience, best: f64::INFINITY, best_epoch: None, wait: 0 })
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopDecision::Continue { improved: true };
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue { improved: false }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Result<Self> {
        if patience < 1 || !(factor > 0.0 && factor < 1.0) || !(min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "plateau needs patience ≥ 1, factor in (0, 1) and min_lr ≥ 0 (got {patience}, {factor}, {min_lr})"
            )));
        }
        Ok(Self { patience, factor, min_lr, best: f64::INFINITY, wait: 0 })
    }

    /// Returns the learning rate to use for the next epoch.
    pub fn update(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn run(kind: OptimizerKind, theta: &mut [f64], g: &[f64], steps: usize) {
        let mut st = OptimizerState::new(kind).unwrap();
        for _ in 0..steps {
            st.apply(vec![&mut *theta], vec![g]).unwrap();
        }
    }

    #[test]
    fn rmsprop_first_step_closed_form() {
        for g in [0.3, -2.0, 1e-3] {
            let mut th = [1.0];
            run(OptimizerKind::rmsprop(), &mut th, &[g], 1);
            let expect = -1e-3 * g / ((0.1f64 * g * g).sqrt() + 1e-8);
            assert_relative_eq!(th[0] - 1.0, expect, max_relative = 1e-12);
            assert_relative_eq!(th[0] - 1.0, -1e-3 * g.signum() / 0.1f64.sqrt(), max_relative = 1e-4);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::rmsprop(), OptimizerKind::adam()] {
            let mut th = [0.5, -3.0];
            run(kind, &mut th, &[0.0, 0.0], 20);
            assert_eq!(th, [0.5, -3.0]);
        }
    }

    #[test]
    fn rmsprop_adapts_per_weight() {
        let mut th = [0.0, 0.0];
        let mut st = OptimizerState::new(OptimizerKind::rmsprop()).unwrap();
        for _ in 0..200 {
            st.apply(vec![&mut th], vec![&[0.5, 1.0]]).unwrap();
        }
        let before = th;
        st.apply(vec![&mut th], vec![&[0.5, 1.0]]).unwrap();
        let (d0, d1) = (before[0] - th[0], before[1] - th[1]);
        assert_relative_eq!(d0, d1, max_relative = 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_whatever_the_scale() {
        for g in [1e-3, 0.7, -5.0, 70.0] {
            let mut th = [0.0];
            run(OptimizerKind::adam(), &mut th, &[g], 1);
            assert_relative_eq!(th[0], -1e-3 * g.signum(), max_relative = 1e-5);
            let mut th10 = [0.0];
            run(OptimizerKind::adam(), &mut th10, &[10.0 * g], 1);
            assert_relative_eq!(th[0], th10[0], max_relative = 1e-5);
        }
    }

    #[test]
    fn layout_mismatch() {
        let mut st = OptimizerState::new(OptimizerKind::adam()).unwrap();
        let mut a = [0.0; 2];
        assert!(st.apply(vec![&mut a], vec![&[1.0]]).is_err());
        st.apply(vec![&mut a], vec![&[1.0, 1.0]]).unwrap();
        let mut b = [0.0; 3];
        assert!(st.apply(vec![&mut b], vec![&[1.0; 3]]).is_err());
        assert!(OptimizerState::new(OptimizerKind::Adam { lr: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }).is_err());
    }

    #[test]
    fn early_stop_counter() {
        let mut es = EarlyStopping::new(10).unwrap();
        assert_eq!(es.update(0, 1.0), StopDecision::Continue { improved: true });
        assert_eq!(es.update(1, 0.9), StopDecision::Continue { improved: true });
        for e in 2..11 {
            assert_eq!(es.update(e, 0.9 + (e % 3) as f64 * 0.01), StopDecision::Continue { improved: false });
        }
        assert_eq!(es.update(11, 0.95), StopDecision::Stop);
        assert_eq!(es.best_epoch, Some(1));
    }

    #[test]
    fn early_stop_never_fires_on_descent_and_resets() {
        let mut es = EarlyStopping::new(10).unwrap();
        for e in 0..500 {
            assert_ne!(es.update(e, 1.0 / (e + 1) as f64), StopDecision::Stop);
        }
        let mut es = EarlyStopping::new(10).unwrap();
        es.update(0, 1.0);
        for e in 1..9 {
            es.update(e, 2.0);
        }
        assert_eq!(es.update(9, 0.5), StopDecision::Continue { improved: true });
        for e in 10..19 {
            assert_ne!(es.update(e, 2.0), StopDecision::Stop);
        }
        assert!(EarlyStopping::new(0).is_err());
    }

    #[test]
    fn plateau_rule() {
        let mut p = PlateauScheduler::new(6, 0.1, 1e-6).unwrap();
        let mut lr = p.update(1.0, 1e-3);
        for _ in 0..5 {
            lr = p.update(1.0, lr);
            assert_eq!(lr, 1e-3);
        }
        lr = p.update(1.0, lr);
        assert_relative_eq!(lr, 1e-4, max_relative = 1e-12);

        let mut p = PlateauScheduler::new(6, 0.1, 1e-6).unwrap();
        let mut lr = 1e-6;
        for _ in 0..20 {
            lr = p.update(1.0, lr);
        }
        assert_eq!(lr, 1e-6);

        let mut p = PlateauScheduler::new(6, 0.1, 1e-6).unwrap();
        p.update(1.0, 1e-3);
        for _ in 0..4 {
            p.update(1.0, 1e-3);
        }
        assert_eq!(p.update(0.5, 1e-3), 1e-3);
        assert_eq!(p.update(0.6, 1e-3), 1e-3);
        assert!(PlateauScheduler::new(6, 1.0, 0.0).is_err());
    }
}
