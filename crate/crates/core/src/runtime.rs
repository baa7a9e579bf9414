//! Online adaptation loop and the comparison baselines.
//!
//! Every adapter consumes pixels only; ground truth stays with the caller.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::bank::Bank;
use crate::data::{DomainId, CHANNELS, SIDE};
use crate::encoder::{CentroidBank, CorruptionEncoder};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::nn::layers::blend;
use crate::nn::{Adam, BnMode, Module, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::signature::{fingerprint_on_tape, Probe, SignatureNet, PROBE_BATCH};
use crate::train::{argmax_rows, normalized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Weight of the memory-bank statistics in the BN refresh.
    pub momentum: f64,
    /// Similarity-variance level below which the bank counts as settled.
    pub phi_thresh: f64,
    pub lr: f64,
    pub steps_per_trigger: usize,
    /// Required lead of the best centroid over the runner-up.
    pub margin: f64,
    /// Consecutive batches a candidate domain must win.
    pub patience: usize,
    pub memory_capacity: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig { momentum: 0.5, phi_thresh: 0.005, lr: 1e-3, steps_per_trigger: 1, margin: 0.05, patience: 1, memory_capacity: 64 }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config(format!("adaptation.momentum must lie in (0, 1], got {}", self.momentum)));
        }
        if !(self.phi_thresh > 0.0) {
            return Err(Error::config(format!("adaptation.phi_thresh must be positive, got {}", self.phi_thresh)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("adaptation.lr must be positive, got {}", self.lr)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config(format!("adaptation.margin must be non-negative, got {}", self.margin)));
        }
        if self.patience == 0 {
            return Err(Error::config("adaptation.patience must be at least 1"));
        }
        if self.memory_capacity == 0 {
            return Err(Error::config("adaptation.memory_capacity must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Darda,
    Bn,
    Entropy,
    None,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Darda, Method::Bn, Method::Entropy, Method::None];

    pub fn name(self) -> &'static str {
        match self {
            Method::Darda => "darda",
            Method::Bn => "bn",
            Method::Entropy => "entropy",
            Method::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// What one adapter did with one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    pub assigned: Option<DomainId>,
    pub shift_event: bool,
    pub bn_update: bool,
    pub adapt_step: bool,
    pub forward_macs: u64,
    pub backward_samples: u64,
    pub mem_proxy_bytes: u64,
}

pub trait Adapter<T: Scalar> {
    fn process_batch(&mut self, pixels: &Tensor<T>) -> Result<BatchOutcome>;
}

/// Everything the latent-space runtime needs, trained offline.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<T> {
    pub encoder: CorruptionEncoder<T>,
    pub centroids: CentroidBank<T>,
    pub signet: SignatureNet<T>,
    pub probe: Probe<T>,
    pub bank: Bank<T>,
}

fn check_batch<T: Scalar>(pixels: &Tensor<T>) -> Result<()> {
    if pixels.rank() != 4 || pixels.shape()[1..] != [CHANNELS, SIDE, SIDE] || pixels.batch() == 0 {
        return Err(Error::shape(format!("stream batches must be [B>0, 3, 32, 32], got {:?}", pixels.shape())));
    }
    Ok(())
}

/// `exp(−S·C̄)` for one signature row against a constant target.
pub fn loss_lu<T: Scalar>(tape: &mut Tape<T>, s: Var, c_bar: &[T]) -> Result<Var> {
    let c = tape.constant(Tensor::new([1, c_bar.len()], c_bar.to_vec())?);
    let prod = tape.mul(s, c)?;
    let dot = tape.sum(prod)?;
    let neg = tape.scale(dot, -T::one())?;
    tape.exp(neg)
}

/// `ℒ_u` through the fingerprint path: probe → live network → `𝒮`.
/// Binds the live network's parameters (gradients reach its trainable
/// ones) and the signature net as constants.
pub fn adaptation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    live: &Backbone<T>,
    signet: &SignatureNet<T>,
    probe: &Probe<T>,
    c_bar: &[T],
) -> Result<(Var, crate::nn::Bound)> {
    let bound = tape.bind(live.parameters());
    let f = fingerprint_on_tape(tape, live, bound.vars(), probe)?;
    let frozen = tape.bind_frozen(signet.parameters());
    let s = signet.forward(tape, &mut frozen.cursor(), f)?;
    Ok((loss_lu(tape, s, c_bar)?, bound))
}

/// The latent-space adaptation runtime.
pub struct DardaRuntime<'a, T> {
    models: &'a Models<T>,
    cfg: AdaptationConfig,
    live: Backbone<T>,
    assigned: DomainId,
    memory: MemoryBank<T>,
    pending: Option<(DomainId, usize)>,
    armed: bool,
    adam: Adam<T>,
}

impl<'a, T: Scalar> DardaRuntime<'a, T> {
    /// Starts on the pristine clean sub-network.
    pub fn new(models: &'a Models<T>, cfg: AdaptationConfig) -> Result<Self> {
        cfg.validate()?;
        let live = models.bank.instantiate(DomainId::CLEAN)?;
        let memory = MemoryBank::new(cfg.memory_capacity, live.n_classes(), &[CHANNELS, SIDE, SIDE])?;
        let adam = Adam::new(cfg.lr);
        Ok(DardaRuntime { models, cfg, live, assigned: DomainId::CLEAN, memory, pending: None, armed: false, adam })
    }

    pub fn assigned(&self) -> DomainId {
        self.assigned
    }

    pub fn live(&self) -> &Backbone<T> {
        &self.live
    }

    pub fn memory(&self) -> &MemoryBank<T> {
        &self.memory
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }

    /// Decides from the batch-mean projection whether the stream moved to
    /// another seen domain's neighbourhood.
    pub fn detect_shift(&mut self, mean_projection: &[T]) -> Option<DomainId> {
        let sims = self.models.centroids.similarities(mean_projection);
        let (best, best_sim) = self.models.centroids.nearest(mean_projection);
        let runner_up = sims.iter().zip(&self.models.centroids.domains).filter(|(_, &d)| d != best).map(|(&s, _)| s).fold(T::neg_infinity(), T::max);
        if best == self.assigned || best_sim - runner_up < T::c(self.cfg.margin) {
            self.pending = None;
            return None;
        }
        let count = match self.pending {
            Some((d, n)) if d == best => n + 1,
            _ => 1,
        };
        if count >= self.cfg.patience {
            self.pending = None;
            Some(best)
        } else {
            self.pending = Some((best, count));
            None
        }
    }

    /// Swaps in a pristine copy of `domain`'s sub-network and arms the
    /// refresh trigger. The memory bank is kept.
    pub fn bootstrap(&mut self, domain: DomainId) -> Result<()> {
        self.live.swap_in(self.models.bank.lookup(domain)?)?;
        self.assigned = domain;
        self.adam = Adam::new(self.cfg.lr);
        self.armed = true;
        Ok(())
    }

    fn current_centroid(&self) -> Result<&[T]> {
        self.models.centroids.get(self.assigned).ok_or_else(|| Error::NotFound(format!("centroid of {}", self.assigned)))
    }

    /// Whether the refresh would fire now.
    pub fn trigger_ready(&self) -> Result<bool> {
        if !self.armed || self.memory.occupancy() < 2 {
            return Ok(false);
        }
        let var = self.memory.similarity_variance(self.current_centroid()?)?;
        Ok(var < T::c(self.cfg.phi_thresh))
    }

    /// Blends the live BN statistics toward those of the memory bank.
    /// Returns the multiply-accumulates spent.
    pub fn ca_bn_update(&mut self) -> Result<u64> {
        let snap = self.memory.snapshot_batch()?;
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(self.live.parameters());
        let x = tape.constant(snap);
        let out = self.live.forward(&mut tape, bound.vars(), x, BnMode::Train)?;
        let m = T::c(self.cfg.momentum);
        for (bn, s) in self.live.state.bns.iter_mut().zip(&out.stats) {
            blend(&mut bn.running_mean, &s.mean, m);
            blend(&mut bn.running_var, &s.var, m);
        }
        Ok(tape.macs())
    }

    /// One Adam step on `exp(−S·C̄)` over the live sub-network's tunable
    /// parameters. Returns `(loss, macs, memory bytes)`.
    pub fn adapt_step(&mut self) -> Result<(f64, u64, u64)> {
        let c_bar = self.memory.mean_embedding()?;
        let mut tape = Tape::new();
        let (loss, bound) = adaptation_loss(&mut tape, &self.live, &self.models.signet, &self.models.probe, &c_bar)?;
        let grads = tape.backward(loss)?;
        let bytes = tape.stored_bytes() + grads.bytes();
        grads.accumulate(self.live.parameters_mut(), &bound);
        self.live.convs.iter_mut().for_each(|c| c.weight.zero_grad());
        self.adam.step(self.live.state.parameters_mut());
        Ok((tape.value(loss).item().f64(), tape.macs(), bytes))
    }
}

impl<T: Scalar> Adapter<T> for DardaRuntime<'_, T> {
    fn process_batch(&mut self, pixels: &Tensor<T>) -> Result<BatchOutcome> {
        check_batch(pixels)?;
        let mut out = BatchOutcome::default();
        let (proj, enc_macs) = self.models.encoder.project(pixels)?;
        out.forward_macs += enc_macs;
        let o = proj.row_len();
        let mut mean = vec![T::zero(); o];
        for row in proj.data().chunks(o) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        if let Some(mean) = normalized(&mean) {
            if let Some(d) = self.detect_shift(&mean) {
                self.bootstrap(d)?;
                out.shift_event = true;
            }
        }
        let (logits, macs, peak) = self.live.infer(pixels, BnMode::Eval)?;
        out.forward_macs += macs;
        out.mem_proxy_bytes = peak;
        out.predictions = argmax_rows(&logits);
        let c_curr = self.current_centroid()?.to_vec();
        for (i, &y) in out.predictions.iter().enumerate() {
            self.memory.insert(pixels.row(i).to_vec(), proj.row(i).to_vec(), y, &c_curr)?;
        }
        if self.trigger_ready()? {
            out.forward_macs += self.ca_bn_update()?;
            out.bn_update = true;
            for _ in 0..self.cfg.steps_per_trigger {
                let (_, macs, bytes) = self.adapt_step()?;
                out.forward_macs += macs;
                out.backward_samples += (self.memory.occupancy() + PROBE_BATCH) as u64;
                out.mem_proxy_bytes = out.mem_proxy_bytes.max(bytes);
                out.adapt_step = true;
            }
            self.armed = false;
            let (logits, macs, _) = self.live.infer(pixels, BnMode::Eval)?;
            out.forward_macs += macs;
            out.predictions = argmax_rows(&logits);
        }
        out.assigned = Some(self.assigned);
        Ok(out)
    }
}

/// Clean backbone, no adaptation.
pub struct NoAdaptation<T> {
    pub net: Backbone<T>,
}

impl<T: Scalar> Adapter<T> for NoAdaptation<T> {
    fn process_batch(&mut self, pixels: &Tensor<T>) -> Result<BatchOutcome> {
        check_batch(pixels)?;
        let (logits, macs, peak) = self.net.infer(pixels, BnMode::Eval)?;
        Ok(BatchOutcome { predictions: argmax_rows(&logits), forward_macs: macs, mem_proxy_bytes: peak, ..Default::default() })
    }
}

/// Normalizes with each test batch's own statistics; nothing persists.
pub struct BnBaseline<T> {
    pub net: Backbone<T>,
}

fn batch_mode(b: usize) -> BnMode {
    if b < 2 {
        BnMode::Eval
    } else {
        BnMode::Train
    }
}

impl<T: Scalar> Adapter<T> for BnBaseline<T> {
    fn process_batch(&mut self, pixels: &Tensor<T>) -> Result<BatchOutcome> {
        check_batch(pixels)?;
        let (logits, macs, peak) = self.net.infer(pixels, batch_mode(pixels.batch()))?;
        Ok(BatchOutcome { predictions: argmax_rows(&logits), forward_macs: macs, mem_proxy_bytes: peak, ..Default::default() })
    }
}

/// Mean Shannon entropy of the row-wise softmax of `[B, K]` logits.
pub fn mean_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let b = tape.value(logits).batch();
    let p = tape.softmax(logits)?;
    let lp = tape.log_softmax(logits, None)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum(plp)?;
    tape.scale(s, T::c(-1.0 / b as f64))
}

/// Continual entropy minimization over the BN affine parameters.
pub struct EntropyBaseline<T> {
    net: Backbone<T>,
    adam: Adam<T>,
}

impl<T: Scalar> EntropyBaseline<T> {
    pub fn new(mut net: Backbone<T>, lr: f64) -> Self {
        net.set_trainable(false);
        net.state.bn_affine_mut().into_iter().for_each(|p| p.trainable = true);
        EntropyBaseline { net, adam: Adam::new(lr) }
    }

    pub fn net(&self) -> &Backbone<T> {
        &self.net
    }

    /// One Adam step on the batch's mean prediction entropy; returns
    /// `(entropy, macs, memory bytes)`.
    pub fn step(&mut self, pixels: &Tensor<T>) -> Result<(f64, u64, u64)> {
        let mut tape = Tape::new();
        let bound = tape.bind(self.net.parameters());
        let x = tape.constant(pixels.clone());
        let out = self.net.forward(&mut tape, bound.vars(), x, batch_mode(pixels.batch()))?;
        let h = mean_entropy(&mut tape, out.logits)?;
        let grads = tape.backward(h)?;
        let bytes = tape.stored_bytes() + grads.bytes();
        grads.accumulate(self.net.parameters_mut(), &bound);
        self.adam.step(self.net.state.bn_affine_mut());
        Ok((tape.value(h).item().f64(), tape.macs(), bytes))
    }
}

impl<T: Scalar> Adapter<T> for EntropyBaseline<T> {
    fn process_batch(&mut self, pixels: &Tensor<T>) -> Result<BatchOutcome> {
        check_batch(pixels)?;
        let (_, step_macs, bytes) = self.step(pixels)?;
        let (logits, macs, _) = self.net.infer(pixels, batch_mode(pixels.batch()))?;
        Ok(BatchOutcome {
            predictions: argmax_rows(&logits),
            forward_macs: step_macs + macs,
            backward_samples: pixels.batch() as u64,
            mem_proxy_bytes: bytes,
            ..Default::default()
        })
    }
}
