//! Adam with bias correction, operating on flat parameter slices so the
//! encoder's canonical parameter order is the only coupling.

use crate::error::{Error, Result};

/// Adam optimizer state. Moments are kept per parameter tensor, matched to
/// parameters positionally — callers must present tensors in the same order
/// every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, sizes)
    }

    /// Like [`Adam::new`] with explicit moment decays. A smaller `beta2`
    /// (e.g. 0.99) adapts the step size faster on small noisy batches.
    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, sizes: &[usize]) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Param(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Applies one update. `params[i]` and `grads[i]` must have the length
    /// declared at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape(format!(
                    "tensor of {} scalars against optimizer slot of {}",
                    p.len(),
                    m.len()
                )));
            }
            for i in 0..m.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}
