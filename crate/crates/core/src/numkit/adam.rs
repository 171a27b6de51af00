use super::Tensor2;
use crate::error::{Error, Result};

/// Adam with bias correction. Each tensor keeps its own step count, so a
/// tensor skipped in a step (no gradient reached it) is left untouched and its
/// moments do not decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    tensor_steps: Vec<u64>,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl AdamState {
    /// Defaults β1=0.9, β2=0.999, ε=1e-8. Moment buffers follow the shapes given.
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            tensor_steps: vec![0; shapes.len()],
            m: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. `params` and `grads` are matched by position.
    pub fn step(&mut self, params: &mut [&mut Tensor2], grads: &[Tensor2]) -> Result<()> {
        let grads: Vec<Option<&Tensor2>> = grads.iter().map(Some).collect();
        self.step_some(params, &grads)
    }

    /// Like [`step`](Self::step), but tensors with a `None` gradient are skipped.
    pub fn step_some(
        &mut self,
        params: &mut [&mut Tensor2],
        grads: &[Option<&Tensor2>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                (params.len(), grads.len()),
                (self.m.len(), self.m.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if let Some(g) = g {
                if p.shape() != g.shape() || p.shape() != m.shape() {
                    return Err(Error::shape("adam_step", p.shape(), g.shape()));
                }
            }
        }

        self.step += 1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.tensor_steps[k] += 1;
            let t = self.tensor_steps[k] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                pd[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}
