use rand::Rng as _;

use crate::rng::Rng;

use super::matrix::DenseMatrix;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

impl ParamTensor {
    pub fn new(value: DenseMatrix) -> Self {
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(DenseMatrix::zeros(rows, cols))
    }

    /// Uniform in ±√(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(DenseMatrix::from_vec(rows, cols, values).expect("sized by construction"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.values().len());
        for (a, b) in self.grad.values_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &ParamTensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut ParamTensor)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn scale_grad(&mut self, s: f64) {
        for (_, p) in self.params_mut() {
            p.grad.scale(s);
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.values().len()).sum()
    }
}
