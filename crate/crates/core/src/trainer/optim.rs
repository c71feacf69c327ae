//! Parameter updates: momentum SGD, Adam, and the EMA teacher update.

use crate::backbone::NetParams;
use crate::datamodel::OptimizerKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state. Momentum SGD follows `v = mu*v + g;
/// p -= lr*v`; Adam uses bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Completed steps.
    pub steps: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    pub m: Vec<Tensor>,
    /// Second moment (Adam only; empty tensors for SGD).
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, params: &NetParams) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        let m = params.tensors().iter().map(zeros).collect();
        let v = match kind {
            OptimizerKind::Adam => params.tensors().iter().map(zeros).collect(),
            OptimizerKind::Sgd => params.tensors().iter().map(|_| Tensor::zeros(vec![0])).collect(),
        };
        Optimizer {
            kind,
            lr,
            momentum,
            steps: 0,
            m,
            v,
        }
    }

    /// Applies one update; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut NetParams, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Validation(format!(
                "{} gradients / {} buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::Shape(format!("gradient {i} has {} of {} values", g.len(), p.len())));
                }
            }
            let gv = |j: usize| g.map_or(0.0, |g| g.data()[j]);
            match self.kind {
                OptimizerKind::Sgd => {
                    let m = self.m[i].data_mut();
                    for (j, pv) in p.data_mut().iter_mut().enumerate() {
                        m[j] = self.momentum * m[j] + gv(j);
                        *pv -= self.lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, pv) in p.data_mut().iter_mut().enumerate() {
                        let gj = gv(j);
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        *pv -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` (0 leaves
/// them untouched). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, elementwise.
pub fn ema_update(teacher: &mut NetParams, student: &NetParams, lambda: f64) -> Result<()> {
    teacher.check_structure(student)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("EMA coefficient {lambda} outside [0, 1]")));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}
