//! Seeded parameter initialization. All draws go through one ChaCha stream
//! in construction order, so a build is a pure function of its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dtype::Scalar;
use crate::tensor::Tensor;

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(self.rng.gen_range(-bound..bound)))
            .collect();
        Tensor::param(shape, data).unwrap()
    }

    /// Kaiming-uniform (fan-in, ReLU gain): U(±√(6/fan_in)).
    /// Conv weight [C_out, C_in/g, kh, kw] has fan_in = (C_in/g)·kh·kw.
    pub fn kaiming_conv<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// Xavier-uniform for linear maps [in, out]: U(±√(6/(in+out))).
    pub fn xavier_linear<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let (fan_in, fan_out) = (shape[0], shape[1]);
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        Tensor::param(shape, vec![T::zero(); n]).unwrap()
    }

    pub fn constant<T: Scalar>(&mut self, shape: &[usize], v: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        Tensor::param(shape, vec![T::from_f64(v); n]).unwrap()
    }
}

/// Standalone helper for test fixtures: uniform tensor without grad.
pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Same distribution, but tracked as a gradcheck leaf.
pub fn random_param<T: Scalar>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::param(shape, data).unwrap()
}
