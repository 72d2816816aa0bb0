//! First-order optimisers with PyTorch update rules.

use crate::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update to every parameter that currently holds a gradient.
    fn step(&mut self);

    fn params(&self) -> &[Tensor];

    fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }
}

/// Adam without weight decay or amsgrad.
pub struct Adam {
    params: Vec<Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam { params, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }
}

impl Optimizer for Adam {
    fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = (self.lr / bc1) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let eps = self.eps as f32;
        let bc2_sqrt = bc2_sqrt as f32;
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let mut data = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                data[i] -= step_size * m[i] / denom;
            }
        }
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }
}

/// SGD with classical (non-Nesterov, undampened) momentum.
pub struct Sgd {
    params: Vec<Tensor>,
    lr: f64,
    momentum: f64,
    buffers: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, lr: f64, momentum: f64) -> Self {
        let buffers = vec![None; params.len()];
        Sgd { params, lr, momentum, buffers }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self) {
        let lr = self.lr as f32;
        let mu = self.momentum as f32;
        for (p, buf) in self.params.iter().zip(&mut self.buffers) {
            let grad = p.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let mut data = p.data_mut();
            if mu == 0.0 {
                for (d, gi) in data.iter_mut().zip(g) {
                    *d -= lr * gi;
                }
                continue;
            }
            // the first step seeds the buffer with the raw gradient
            match buf {
                None => *buf = Some(g.clone()),
                Some(b) => {
                    for (bi, gi) in b.iter_mut().zip(g) {
                        *bi = mu * *bi + gi;
                    }
                }
            }
            let b = buf.as_ref().expect("momentum buffer initialised");
            for (d, bi) in data.iter_mut().zip(b) {
                *d -= lr * bi;
            }
        }
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }
}
