use crate::error::{contract, Result};

use super::{Real, Tensor};

/// Adam with bias-corrected moments. Moment buffers are keyed by the
/// position of each tensor in the slice passed to [`Adam::step`], so callers
/// must pass parameters in a stable order.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    steps: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self::with_betas(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(contract("adam parameter set changed between steps"));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(contract(format!("parameter {i} has no gradient")));
        }
        self.steps += 1;
        let c1 = T::one() - self.beta1.powi(self.steps);
        let c2 = T::one() - self.beta2.powi(self.steps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.take().expect("checked above");
            for (((x, &g), m), v) in p.data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
