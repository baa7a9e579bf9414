//! Pair downsampler and the residual network `g` that isolates the
//! corruption component of a single image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, CHANNELS, SIDE};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, LayerSpec, Module, Parameter, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::train::shuffled_batches;

/// Anti-diagonal averaging kernel.
pub const G1: [[f64; 2]; 2] = [[0.0, 0.5], [0.5, 0.0]];
/// Main-diagonal averaging kernel.
pub const G2: [[f64; 2]; 2] = [[0.5, 0.0], [0.0, 0.5]];
pub const LEAKY_SLOPE: f64 = 0.1;
pub const HIDDEN: usize = 16;
/// Side of the downsampled images `g` consumes.
pub const HALF: usize = SIDE / 2;

fn downsample_with<T: Scalar>(x: &Tensor<T>, k: [[f64; 2]; 2]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("pair downsampling needs [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("pair downsampling needs even sides, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let k = k.map(|r| r.map(T::c));
    let d = x.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in d.chunks(h * w) {
        for i in 0..ho {
            for j in 0..wo {
                let p = |di: usize, dj: usize| plane[(2 * i + di) * w + 2 * j + dj];
                out.push(k[0][0] * p(0, 0) + k[0][1] * p(0, 1) + k[1][0] * p(1, 0) + k[1][1] * p(1, 1));
            }
        }
    }
    Tensor::new([b, c, ho, wo], out)
}

/// `(G1(x), G2(x))`: fixed stride-2 depthwise filters, each `[B, C, H/2, W/2]`.
pub fn pair_downsample<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((downsample_with(x, G1)?, downsample_with(x, G2)?))
}

/// Multiply-accumulates of one pair downsampling (4 taps per output, two kernels).
pub fn pair_downsample_macs(batch: usize) -> u64 {
    (batch * CHANNELS * HALF * HALF * 4 * 2) as u64
}

/// `g`: three 3×3 convolutions 3→16→16→3 with leaky ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorNet<T> {
    pub convs: [Conv2d<T>; 3],
}

impl<T: Scalar> ExtractorNet<T> {
    pub fn new(rng: &mut impl Rng) -> Self {
        ExtractorNet {
            convs: [
                Conv2d::new(CHANNELS, HIDDEN, 3, 1, 1, true, rng),
                Conv2d::new(HIDDEN, HIDDEN, 3, 1, 1, true, rng),
                Conv2d::new(HIDDEN, CHANNELS, 3, 1, 1, true, rng),
            ],
        }
    }

    /// An extractor whose output is identically zero.
    pub fn zero(rng: &mut impl Rng) -> Self {
        let mut g = Self::new(rng);
        for p in g.parameters_mut() {
            p.value.data_mut().fill(T::zero());
        }
        g
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &mut impl Iterator<Item = Var>, x: Var) -> Result<Var> {
        let mut h = self.convs[0].forward(tape, vars, x)?;
        h = tape.leaky_relu(h, T::c(LEAKY_SLOPE))?;
        h = self.convs[1].forward(tape, vars, h)?;
        h = tape.leaky_relu(h, T::c(LEAKY_SLOPE))?;
        self.convs[2].forward(tape, vars, h)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.convs.iter().map(|c| c.spec(HALF, HALF)).collect()
    }
}

impl<T: Scalar> Module<T> for ExtractorNet<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// Tape values for one batch: the two downsampled views and `g` of each.
#[derive(Clone, Copy, Debug)]
pub struct Residuals {
    pub g1: Var,
    pub g2: Var,
    pub r1: Var,
    pub r2: Var,
}

impl Residuals {
    pub fn compute<T: Scalar>(net: &ExtractorNet<T>, tape: &mut Tape<T>, vars: &[Var], x: &Tensor<T>) -> Result<Self> {
        let (a, b) = pair_downsample(x)?;
        let g1 = tape.constant(a);
        let g2 = tape.constant(b);
        let r1 = net.forward(tape, &mut vars.iter().copied(), g1)?;
        let r2 = net.forward(tape, &mut vars.iter().copied(), g2)?;
        Ok(Residuals { g1, g2, r1, r2 })
    }

    /// `(G̃2, G̃1) = (G1 − g(G1), G2 − g(G2))`.
    pub fn counterparts<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<(Var, Var)> {
        Ok((tape.sub(self.g1, self.r1)?, tape.sub(self.g2, self.r2)?))
    }

    /// `x_res = g(G1) ‖ g(G2)` along channels.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.concat_channels(&[self.r1, self.r2])
    }

    /// `½(‖G̃2 − G2‖² + ‖G̃1 − G1‖²)`, averaged over the batch.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let batch = tape.value(self.g1).batch();
        let (p2, p1) = self.counterparts(tape)?;
        let d2 = tape.sub(p2, self.g2)?;
        let d1 = tape.sub(p1, self.g1)?;
        let s2 = tape.mul(d2, d2)?;
        let s1 = tape.mul(d1, d1)?;
        let s = tape.add(s1, s2)?;
        let total = tape.sum(s)?;
        tape.scale(total, T::c(0.5 / batch as f64))
    }
}

/// `(G̃2(x), G̃1(x))` as plain tensors.
pub fn predict_counterpart<T: Scalar>(net: &ExtractorNet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let b = tape.bind(net.parameters());
    let r = Residuals::compute(net, &mut tape, b.vars(), x)?;
    let (p2, p1) = r.counterparts(&mut tape)?;
    Ok((tape.value(p2).clone(), tape.value(p1).clone()))
}

/// `x_res` as a plain tensor `[B, 6, 16, 16]`.
pub fn extract<T: Scalar>(net: &ExtractorNet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = tape.bind(net.parameters());
    let r = Residuals::compute(net, &mut tape, b.vars(), x)?;
    let f = r.features(&mut tape)?;
    Ok(tape.value(f).clone())
}

/// Counterpart loss on a labeled batch; only seen corruptions are accepted.
pub fn loss_ln<T: Scalar>(net: &ExtractorNet<T>, batch: &Dataset<T>) -> Result<T> {
    batch.ensure_seen()?;
    let mut tape = Tape::new();
    let b = tape.bind(net.parameters());
    let r = Residuals::compute(net, &mut tape, b.vars(), &batch.images)?;
    let l = r.loss(&mut tape)?;
    Ok(tape.value(l).item())
}

/// Target used by [`fit_residual`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualTarget {
    /// `E‖y1 − g(y1) − y2‖²` with `y2` the other noisy view.
    Noisy,
    /// `E‖y1 − g(y1) − x‖²` with `x` the clean view.
    Clean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFitReport {
    pub target: ResidualTarget,
    pub epoch_losses: Vec<f64>,
    /// `mean ‖g(y1) − e1‖²` per sample on the evaluation split.
    pub noise_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

fn single_view_loss<T: Scalar>(tape: &mut Tape<T>, y1: Var, r1: Var, target: Var) -> Result<Var> {
    let batch = tape.value(y1).batch();
    let p = tape.sub(y1, r1)?;
    let d = tape.sub(p, target)?;
    let s = tape.mul(d, d)?;
    let total = tape.sum(s)?;
    tape.scale(total, T::c(0.5 / batch as f64))
}

/// Trains `g` on `y1 = G1(noisy)` against either the other noisy view or the
/// clean view, then scores the extracted residual against the true noise
/// `G1(noisy − clean)` on a separate split.
pub fn fit_residual<T: Scalar>(
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    eval_clean: &Tensor<T>,
    eval_noisy: &Tensor<T>,
    target: ResidualTarget,
    cfg: &ResidualFitConfig,
) -> Result<(ExtractorNet<T>, ResidualFitReport)> {
    clean.same_shape(noisy)?;
    eval_clean.same_shape(eval_noisy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ExtractorNet::new(&mut rng);
    let mut adam = Adam::new(cfg.lr);
    let (y1_all, y2_all) = pair_downsample(noisy)?;
    let (x1_all, _) = pair_downsample(clean)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(noisy.batch(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let mut tape = Tape::new();
            let bound = tape.bind(net.parameters());
            let y1 = tape.constant(y1_all.select(idx)?);
            let t = match target {
                ResidualTarget::Noisy => y2_all.select(idx)?,
                ResidualTarget::Clean => x1_all.select(idx)?,
            };
            let t = tape.constant(t);
            let r1 = net.forward(&mut tape, &mut bound.cursor(), y1)?;
            let loss = single_view_loss(&mut tape, y1, r1, t)?;
            total += tape.value(loss).item().f64();
            tape.backward(loss)?.accumulate(net.parameters_mut(), &bound);
            adam.step(net.parameters_mut());
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    let noise_mse = residual_noise_mse(&net, eval_clean, eval_noisy)?;
    Ok((net, ResidualFitReport { target, epoch_losses, noise_mse }))
}

/// `mean_i ‖g(G1(noisy_i)) − G1(noisy_i − clean_i)‖²`.
pub fn residual_noise_mse<T: Scalar>(net: &ExtractorNet<T>, clean: &Tensor<T>, noisy: &Tensor<T>) -> Result<f64> {
    let noise = noisy.sub(clean)?;
    let (e1, _) = pair_downsample(&noise)?;
    let (y1, _) = pair_downsample(noisy)?;
    let mut tape = Tape::new();
    let bound = tape.bind(net.parameters());
    let y = tape.constant(y1);
    let r = net.forward(&mut tape, &mut bound.cursor(), y)?;
    let d = tape.value(r).sub(&e1)?;
    Ok(d.sq_norm().f64() / noisy.batch() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_values() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 5.0]).unwrap();
        let (a, b) = pair_downsample(&x).unwrap();
        assert_eq!(a.data(), &[2.5]);
        assert_eq!(b.data(), &[3.0]);
    }

    #[test]
    fn constant_image_is_preserved() {
        let x = Tensor::<f64>::full([2, 3, 32, 32], 0.37);
        let (a, b) = pair_downsample(&x).unwrap();
        assert_eq!(a.shape(), &[2, 3, 16, 16]);
        assert!(a.data().iter().chain(b.data()).all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn odd_sides_rejected() {
        let x = Tensor::<f64>::zeros([1, 3, 5, 4]);
        assert!(matches!(pair_downsample(&x), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn kernel_constants_are_exact() {
        assert_eq!(G1, [[0.0, 0.5], [0.5, 0.0]]);
        assert_eq!(G2, [[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn zero_extractor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = ExtractorNet::<f64>::zero(&mut rng);
        let x = Tensor::<f64>::from_f64([1, 3, 32, 32], &(0..3072).map(|i| (i % 17) as f64 / 17.0).collect::<Vec<_>>()).unwrap();
        let (p2, p1) = predict_counterpart(&g, &x).unwrap();
        let (a, b) = pair_downsample(&x).unwrap();
        assert_eq!(p2, a);
        assert_eq!(p1, b);
        assert!(extract(&g, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(extract(&g, &x).unwrap().shape(), &[1, 6, 16, 16]);
    }

    #[test]
    fn macs_of_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = ExtractorNet::<f64>::new(&mut rng);
        let per_view = crate::nn::mac_count(&g.layer_specs(), 1).unwrap();
        assert_eq!(per_view, 110_592 + 589_824 + 110_592);
    }
}
