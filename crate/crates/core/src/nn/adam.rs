use crate::nn::param::Parameter;
use crate::scalar::Scalar;

/// Adam with bias correction. Moment slots follow the order in which
/// parameters are handed to [`Adam::step`]; pass them in the same order
/// every step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr: T::c(lr), beta1: T::c(0.9), beta2: T::c(0.999), eps: T::c(1e-8), step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    /// Applies one update to every trainable parameter, then zeroes all grads.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (slot, p) in params.into_iter().enumerate() {
            if slot == self.m.len() {
                self.m.push(vec![T::zero(); p.value.numel()]);
                self.v.push(vec![T::zero(); p.value.numel()]);
            }
            assert_eq!(self.m[slot].len(), p.value.numel(), "parameter order changed between Adam steps");
            if p.trainable {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for ((w, &g), (mi, vi)) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                    *mi = self.beta1 * *mi + (T::one() - self.beta1) * g;
                    *vi = self.beta2 * *vi + (T::one() - self.beta2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            p.zero_grad();
        }
    }
}
