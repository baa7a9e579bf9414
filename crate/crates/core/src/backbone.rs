//! The classifier: a frozen convolutional trunk plus a swappable
//! sub-network (every BN layer and the dense head).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DomainId, CHANNELS, SIDE};
use crate::error::{Error, Result};
use crate::nn::{mac_count, Adam, BatchNorm, BatchStats, BnMode, Conv2d, Dense, LayerSpec, Module, Parameter, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::train::{accuracy, argmax_rows, cross_entropy, shuffled_batches};

pub const WIDTHS: [usize; 3] = [16, 32, 64];
pub const HEAD_HIDDEN: usize = 32;

/// Per-domain tunable state: BN affine parameters and statistics plus the
/// dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNetworkState<T> {
    pub origin: DomainId,
    pub bns: Vec<BatchNorm<T>>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub fingerprint: Option<Tensor<T>>,
    pub signature: Option<Vec<T>>,
}

impl<T: Scalar> SubNetworkState<T> {
    fn new(n_classes: usize, rng: &mut impl Rng) -> Self {
        SubNetworkState {
            origin: DomainId::CLEAN,
            bns: WIDTHS.iter().map(|&c| BatchNorm::new(c)).collect(),
            fc1: Dense::new(WIDTHS[2], HEAD_HIDDEN, rng),
            fc2: Dense::new(HEAD_HIDDEN, n_classes, rng),
            fingerprint: None,
            signature: None,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.fc2.bias.value.numel()
    }

    /// Parameters plus running statistics agree in shape with `other`.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let a = self.parameters();
        let b = other.parameters();
        let same_params = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.value.shape() == y.value.shape());
        let same_stats = self.bns.len() == other.bns.len()
            && self.bns.iter().zip(&other.bns).all(|(x, y)| x.running_mean.len() == y.running_mean.len() && x.running_var.len() == y.running_var.len());
        if same_params && same_stats {
            Ok(())
        } else {
            Err(Error::shape("sub-network state does not match the backbone architecture"))
        }
    }

    /// The BN affine parameters only.
    pub fn bn_affine_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.bns.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

impl<T: Scalar> Module<T> for SubNetworkState<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.bns.iter().flat_map(|b| b.params()).collect();
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.bns.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Live network: shared trunk with one sub-network state swapped in.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub convs: Vec<Conv2d<T>>,
    pub state: SubNetworkState<T>,
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Per-BN-layer batch statistics (Train mode only).
    pub stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = CHANNELS;
        let convs = WIDTHS
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(cin, c, 3, 1, 1, false, &mut rng);
                cin = c;
                conv
            })
            .collect();
        Backbone { convs, state: SubNetworkState::new(n_classes, &mut rng) }
    }

    pub fn n_classes(&self) -> usize {
        self.state.n_classes()
    }

    /// Conv weights stop receiving gradients from now on.
    pub fn freeze_trunk(&mut self) {
        self.convs.iter_mut().for_each(|c| c.weight.trainable = false);
    }

    pub fn trunk_parameters(&self) -> Vec<&Parameter<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    /// Binds the trunk and state parameters (in [`Module::parameters`] order).
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mode: BnMode) -> Result<ForwardOutput<T>> {
        let mut it = vars.iter().copied();
        let trunk: Vec<Var> = it.by_ref().take(self.convs.len()).collect();
        let mut h = x;
        let mut stats = Vec::new();
        for (i, (conv, bn)) in self.convs.iter().zip(&self.state.bns).enumerate() {
            h = conv.forward(tape, &mut trunk[i..=i].iter().copied(), h)?;
            let (y, s) = bn.forward(tape, &mut it, h, mode)?;
            stats.extend(s);
            h = tape.relu(y)?;
            h = tape.maxpool2d(h, 2, 2)?;
        }
        h = tape.global_avg_pool(h)?;
        h = self.state.fc1.forward(tape, &mut it, h)?;
        h = tape.relu(h)?;
        let logits = self.state.fc2.forward(tape, &mut it, h)?;
        Ok(ForwardOutput { logits, stats })
    }

    /// Logits without gradients, plus the multiply-accumulates and peak
    /// single-op bytes of the pass.
    pub fn infer(&self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, u64, u64)> {
        let mut tape = Tape::new();
        let bound = tape.bind(self.parameters().into_iter());
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, bound.vars(), xv, mode)?;
        Ok((tape.value(out.logits).clone(), tape.macs(), tape.peak_op_bytes()))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x, BnMode::Eval)?.0))
    }

    /// Eval-mode accuracy, evaluated in chunks.
    pub fn evaluate(&self, data: &Dataset<T>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::config("cannot evaluate on an empty split"));
        }
        let mut pred = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(data.len())).collect();
            pred.extend(self.predict(&data.images.select(&idx)?)?);
        }
        Ok(accuracy(&pred, &data.labels))
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        let mut side = SIDE;
        for c in &self.convs {
            v.push(c.spec(side, side));
            v.push(LayerSpec::Free("bn+relu+pool"));
            side /= 2;
        }
        v.push(LayerSpec::Free("global average pool"));
        v.push(self.state.fc1.spec());
        v.push(self.state.fc2.spec());
        v
    }

    pub fn macs_per_sample(&self) -> u64 {
        mac_count(&self.layer_specs(), 1).expect("static shapes")
    }

    /// Replaces the sub-network. Zero multiply-accumulates.
    pub fn swap_in(&mut self, state: &SubNetworkState<T>) -> Result<()> {
        self.state.check_compatible(state)?;
        self.state = state.clone();
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = self.trunk_parameters();
        v.extend(self.state.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.state.parameters_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 64, lr: 1e-3, seed: 0 }
    }
}

/// Mini-batch cross-entropy training with Train-mode BN; running statistics
/// follow each batch. Trains whatever parameters are marked trainable.
/// Returns the mean loss of each epoch.
pub fn train_classifier<T: Scalar>(net: &mut Backbone<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<Vec<f64>> {
    data.ensure_seen()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = shuffled_batches(data.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for idx in batches.iter().filter(|b| b.len() >= 2) {
            let mut tape = Tape::new();
            let bound = tape.bind(net.parameters());
            let x = tape.constant(data.images.select(idx)?);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let out = net.forward(&mut tape, bound.vars(), x, BnMode::Train)?;
            let loss = cross_entropy(&mut tape, out.logits, &labels)?;
            total += tape.value(loss).item().f64();
            tape.backward(loss)?.accumulate(net.parameters_mut(), &bound);
            adam.step(net.parameters_mut());
            for (bn, s) in net.state.bns.iter_mut().zip(&out.stats) {
                bn.update_running(s);
            }
        }
        losses.push(total / batches.len() as f64);
    }
    Ok(losses)
}

/// Replaces every BN layer's running statistics with the average batch
/// statistics over `data` (Train-mode passes, no parameter change).
pub fn reestimate_statistics<T: Scalar>(net: &mut Backbone<T>, data: &Tensor<T>, batch_size: usize) -> Result<()> {
    let n = data.batch();
    let mut sums: Vec<(Vec<T>, Vec<T>)> = net.state.bns.iter().map(|b| (vec![T::zero(); b.channels()], vec![T::zero(); b.channels()])).collect();
    let mut count = 0usize;
    for start in (0..n).step_by(batch_size.max(2)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(2)).min(n)).collect();
        if idx.len() < 2 {
            continue;
        }
        let mut tape = Tape::new();
        let bound = tape.bind(net.parameters());
        let x = tape.constant(data.select(&idx)?);
        let out = net.forward(&mut tape, bound.vars(), x, BnMode::Train)?;
        for ((m, v), s) in sums.iter_mut().zip(&out.stats) {
            m.iter_mut().zip(&s.mean).for_each(|(a, &b)| *a += b);
            v.iter_mut().zip(&s.var).for_each(|(a, &b)| *a += b);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientSamples { needed: 2, have: n });
    }
    let c = T::c(count as f64);
    for (bn, (m, v)) in net.state.bns.iter_mut().zip(sums) {
        bn.running_mean = m.into_iter().map(|x| x / c).collect();
        bn.running_var = v.into_iter().map(|x| x / c).collect();
    }
    Ok(())
}

/// Pre-trains the whole classifier on clean data and freezes its trunk.
pub fn train_backbone<T: Scalar>(data: &Dataset<T>, cfg: &TrainConfig) -> Result<(Backbone<T>, Vec<f64>)> {
    if data.domain() != DomainId::CLEAN {
        return Err(Error::config(format!("backbone pre-training expects clean data, got {}", data.domain())));
    }
    let mut net = Backbone::new(data.n_classes, cfg.seed);
    let losses = train_classifier(&mut net, data, cfg)?;
    net.freeze_trunk();
    Ok((net, losses))
}

/// Starting from the backbone's (clean) state, fine-tunes BN affine
/// parameters and the head on one seen domain with the trunk frozen, then
/// re-estimates the BN statistics on that domain.
pub fn fine_tune_subnetwork<T: Scalar>(backbone: &Backbone<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<SubNetworkState<T>> {
    data.ensure_seen()?;
    let mut net = backbone.clone();
    net.freeze_trunk();
    net.state.set_trainable(true);
    net.state.fingerprint = None;
    net.state.signature = None;
    train_classifier(&mut net, data, cfg)?;
    reestimate_statistics(&mut net, &data.images, cfg.batch_size)?;
    net.state.origin = data.domain();
    net.state.zero_grad();
    Ok(net.state)
}
