use super::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::range("momentum", "must lie in [0, 1)"));
        }
        Ok(Self {
            momentum,
            velocities: Vec::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    /// Applies one update to every parameter and clears its gradient.
    ///
    /// Parameters must be passed in the same order on every call; velocity
    /// slots are positional.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::range("lr", "must be finite and non-negative"));
        }
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| p.requires_grad() && p.grad().is_none()) {
            return Err(Error::Usage(format!(
                "parameter {i} has no gradient; run backward before stepping"
            )));
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.velocities.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocities.len(),
                params.len()
            )));
        }

        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().expect("checked above").to_vec();
            for ((w, vel), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vel = self.momentum * *vel + gv;
                *w -= lr * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Cosine-decayed learning rate, `lr·cos(7π·t / (16·T))`, as used by FixMatch-style
/// trainers. Returns `base_lr` unchanged when `total == 0`.
pub fn cosine_lr(base_lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = step as f64 / total as f64;
    base_lr * (7.0 * std::f64::consts::PI * frac / 16.0).cos()
}
