use super::params::{flatten, Parameters};
use crate::error::{GecoError, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` using `grads`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = flatten(grads);
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(GecoError::Numeric(format!("non-finite gradient at scalar {bad}")));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        } else if self.m.len() != g.len() {
            return Err(GecoError::Shape(format!(
                "optimizer tracks {} scalars, gradient has {}",
                self.m.len(),
                g.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut(&mut |_, data| {
            for p in data.iter_mut() {
                let gi = g[off];
                m[off] = b1 * m[off] + (1.0 - b1) * gi;
                v[off] = b2 * v[off] + (1.0 - b2) * gi * gi;
                let mh = m[off] / bc1;
                let vh = v[off] / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
                off += 1;
            }
        });
        Ok(())
    }
}
