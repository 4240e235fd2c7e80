//! Adam with a stepped exponential learning-rate schedule, plus the
//! early-stopping rule used during episodic training.

use ndarray::ArrayD;

use super::{EmbeddingNetwork, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub base_lr: f64,
    /// multiplicative decay applied every `decay_interval` epochs
    pub decay_gamma: f64,
    pub decay_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 0.001,
            decay_gamma: 0.65,
            decay_interval: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment accumulators bound to one network's parameter order.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar> {
    pub cfg: AdamConfig,
    step: u64,
    moments: Option<Vec<(ArrayD<F>, ArrayD<F>)>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            moments: None,
        }
    }

    /// lr(epoch) = base_lr * gamma^floor(epoch / interval)
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.cfg.base_lr * self.cfg.decay_gamma.powi((epoch / self.cfg.decay_interval) as i32)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one Adam update from the gradients currently accumulated in the
    /// network. Running batch-norm stats are not parameters and stay
    /// untouched.
    pub fn step(&mut self, net: &mut EmbeddingNetwork<F>, epoch: usize) -> Result<()> {
        self.step += 1;
        let lr = self.lr_at(epoch);
        let mut pairs = net.param_pairs();
        let moments = self.moments.get_or_insert_with(|| {
            pairs
                .iter()
                .map(|(v, _)| (ArrayD::zeros(v.raw_dim()), ArrayD::zeros(v.raw_dim())))
                .collect()
        });
        if moments.len() != pairs.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameter tensors", moments.len()),
                got: format!("{}", pairs.len()),
            });
        }

        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1f, b2f) = (super::fl::<F>(b1), super::fl::<F>(b2));
        let one = F::one();

        for ((value, grad), (m, v)) in pairs.iter_mut().zip(moments.iter_mut()) {
            let vs = value.as_slice_mut().expect("standard layout");
            let gs = grad.as_slice().expect("standard layout");
            let ms = m.as_slice_mut().expect("standard layout");
            let ss = v.as_slice_mut().expect("standard layout");
            for i in 0..vs.len() {
                let g = gs[i];
                ms[i] = b1f * ms[i] + (one - b1f) * g;
                ss[i] = b2f * ss[i] + (one - b2f) * g * g;
                let m_hat = ms[i].to_f64().unwrap() / bc1;
                let v_hat = ss[i].to_f64().unwrap() / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                vs[i] = vs[i] - super::fl(update);
            }
        }
        Ok(())
    }

    /// (step count, flat moment tensors) for serialization.
    pub fn raw_state(&self) -> (u64, Option<&[(ArrayD<F>, ArrayD<F>)]>) {
        (self.step, self.moments.as_deref())
    }

    pub fn from_raw(cfg: AdamConfig, step: u64, moments: Vec<(ArrayD<F>, ArrayD<F>)>) -> Self {
        OptimizerState {
            cfg,
            step,
            moments: Some(moments),
        }
    }
}

/// Scan per-epoch validation accuracies: returns the best epoch (earliest on
/// ties) and the epoch at which training stops, if the best fails to improve
/// for `patience` epochs.
pub fn early_stopping(accuracies: &[f64], patience: usize) -> (usize, Option<usize>) {
    assert!(!accuracies.is_empty(), "need at least one epoch");
    let mut best = 0usize;
    for (epoch, &acc) in accuracies.iter().enumerate() {
        if acc > accuracies[best] {
            best = epoch;
        }
        if epoch - best >= patience && patience > 0 {
            return (best, Some(epoch));
        }
    }
    (best, None)
}
