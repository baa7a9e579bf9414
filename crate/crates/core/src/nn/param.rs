use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// A learnable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { value, grad, trainable: true }
    }

    /// Zero-mean Gaussian init with the given standard deviation.
    pub fn normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::c(z * std)
            })
            .collect();
        Self::new(Tensor::new(shape, data).expect("shape matches generated data"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

/// Anything that owns parameters. Order of `parameters` and
/// `parameters_mut` must agree; tape bindings rely on it.
pub trait Module<T: Scalar> {
    fn parameters(&self) -> Vec<&Parameter<T>>;

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.parameters_mut().into_iter().for_each(|p| p.trainable = trainable);
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }
}
