use crate::{ParamStore, Scalar, Tensor};

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescale gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]);
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::of(self.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps * bc2.sqrt()));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                *w -= step_size * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for SgdMomentum<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        }
        let (mu, lr) = (T::of(self.momentum), T::of(self.lr));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let vel = self.velocity[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                vel[j] = mu * vel[j] + g[j];
                *w -= lr * vel[j];
            }
        }
    }
}
