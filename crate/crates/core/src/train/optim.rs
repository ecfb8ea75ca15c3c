use crate::tensor::{Element, Param, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected adaptive-moment optimizer over a fixed parameter list.
/// Parameters marked non-trainable are skipped and keep zero moments.
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<Param<T>>,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: Vec<Param<T>>, lr: f64) -> Self {
        let m: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(&p.shape())).collect();
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            v: m.clone(),
            m,
            params,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn moments(&self, i: usize) -> (&Tensor<f64>, &Tensor<f64>) {
        (&self.m[i], &self.v[i])
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            if !p.is_trainable() {
                continue;
            }
            p.update(|value, grad| {
                let it = value.data_mut().iter_mut().zip(grad.data());
                for ((x, &g), (m, v)) in it.zip(m.data_mut().iter_mut().zip(v.data_mut())) {
                    let g = g.as_f64();
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let delta = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    *x = T::from_f64(x.as_f64() - delta);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.zero_grad());
    }
}
