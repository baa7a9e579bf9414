//! Parameterized layers shared by every network in the crate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::macs::LayerSpec;
use crate::nn::param::Parameter;
use crate::nn::tape::{BatchStats, BnMode, Tape, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

fn next(vars: &mut impl Iterator<Item = Var>) -> Result<Var> {
    vars.next().ok_or_else(|| Error::shape("binding has fewer variables than the module has parameters"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-initialized `k×k` convolution.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv2d {
            weight: Parameter::normal([cout, cin, k, k], std, rng),
            bias: bias.then(|| Parameter::new(Tensor::zeros([cout]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &mut impl Iterator<Item = Var>, x: Var) -> Result<Var> {
        let w = next(vars)?;
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(_) => tape.add_bias(y, next(vars)?),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    /// Shape-resolved description for an `h×w` input.
    pub fn spec(&self, h: usize, w: usize) -> LayerSpec {
        let s = self.weight.value.shape();
        LayerSpec::Conv2d { cin: s[1], cout: s[0], kh: s[2], kw: s[3], h, w, stride: self.stride, pad: self.pad }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fin as f64).sqrt();
        Dense { weight: Parameter::normal([fin, fout], std, rng), bias: Parameter::new(Tensor::zeros([fout])) }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &mut impl Iterator<Item = Var>, x: Var) -> Result<Var> {
        let (w, b) = (next(vars)?, next(vars)?);
        tape.dense(x, w, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn spec(&self) -> LayerSpec {
        let s = self.weight.value.shape();
        LayerSpec::Dense { fin: s[0], fout: s[1] }
    }
}

/// Batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    /// Weight of the new batch in the running-stat update.
    pub momentum: T,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(Tensor::full([channels], T::one())),
            beta: Parameter::new(Tensor::zeros([channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::c(BN_EPS),
            momentum: T::c(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &mut impl Iterator<Item = Var>,
        x: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (g, b) = (next(vars)?, next(vars)?);
        tape.batch_norm(x, g, b, (&self.running_mean, &self.running_var), mode, self.eps)
    }

    /// Folds measured batch statistics into the running estimate.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        blend(&mut self.running_mean, &stats.mean, self.momentum);
        blend(&mut self.running_var, &stats.var, self.momentum);
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// `old ← (1 − m)·old + m·new`, elementwise.
pub fn blend<T: Scalar>(old: &mut [T], new: &[T], m: T) {
    for (o, &n) in old.iter_mut().zip(new) {
        *o = (T::one() - m) * *o + m * n;
    }
}
