use crate::dtype::{t, Scalar};
use crate::error::Result;
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay:
/// v ← μ·v + (g + wd·p); p ← p − lr·v.
/// With μ = 0 and wd = 0 a step is exactly p − lr·g.
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Apply one update to every parameter that holds a gradient. The
    /// parameter list must be in the same order on every call.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        }
        let lr: T = t(self.lr);
        let mu: T = t(self.momentum);
        let wd: T = t(self.weight_decay);
        for ((_, p), vel) in params.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.to_vec();
            for ((pv, vv), gv) in data.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                let g = *gv + wd * *pv;
                *vv = mu * *vv + g;
                *pv -= lr * *vv;
            }
            p.set_data(&data)?;
        }
        Ok(())
    }

    /// Total scalars across velocity buffers (equals the trainable
    /// parameter count once a step has run).
    pub fn state_scalars(&self) -> usize {
        self.velocity.iter().map(|v| v.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f64]) -> (String, Tensor<f64>) {
        ("p".to_string(), Tensor::param(&[vals.len()], vals.to_vec()).unwrap())
    }

    #[test]
    fn plain_gd_when_momentum_and_decay_are_zero() {
        let (name, p) = param(&[1.0, -2.0, 3.0]);
        p.accumulate_grad(&[0.5, 0.5, -1.0]);
        let mut sgd = Sgd::new(0.1, 0.0, 0.0);
        sgd.step(&[(name, p.clone())]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0 - 0.05, -2.0 - 0.05, 3.0 + 0.1]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let (name, p) = param(&[0.0]);
        let mut sgd = Sgd::new(1.0, 0.5, 0.0);
        p.accumulate_grad(&[1.0]);
        sgd.step(&[(name.clone(), p.clone())]).unwrap();
        assert_eq!(p.to_vec(), vec![-1.0]); // v=1
        p.zero_grad();
        p.accumulate_grad(&[1.0]);
        sgd.step(&[(name, p.clone())]).unwrap();
        assert_eq!(p.to_vec(), vec![-2.5]); // v=1.5
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let (name, p) = param(&[2.0]);
        p.accumulate_grad(&[0.0]);
        let mut sgd = Sgd::new(0.1, 0.0, 0.5);
        sgd.step(&[(name, p.clone())]).unwrap();
        assert!((p.to_vec()[0] - (2.0 - 0.1 * (0.5 * 2.0))).abs() < 1e-12);
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let (name, p) = param(&[1.5]);
        let mut sgd = Sgd::new(0.1, 0.9, 0.1);
        sgd.step(&[(name, p.clone())]).unwrap();
        assert_eq!(p.to_vec(), vec![1.5]);
    }
}
