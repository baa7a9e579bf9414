//! Sub-network fingerprints, the signature net `𝒮` mapping them into the
//! corruption latent space, and its calibration losses.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, SubNetworkState};
use crate::data::{Dataset, CHANNELS, SIDE};
use crate::error::{Error, Result};
use crate::nn::{Adam, BnMode, Dense, Module, Parameter, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const PROBE_BATCH: usize = 16;
/// Accuracies are clamped to `1 − ACCURACY_EPS` so surprisals stay finite.
pub const ACCURACY_EPS: f64 = 1e-3;
const HIDDEN: usize = 64;
/// Normalizer below which signature training skips `ℒ_r`.
pub const WARMUP_NORMALIZER: f64 = 1.0;

/// Fixed Gaussian input fed to every sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe<T> {
    pub seed: u64,
    pub z: Tensor<T>,
}

impl<T: Scalar> Probe<T> {
    /// Standard normal values clipped to `[0, 1]`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..PROBE_BATCH * CHANNELS * SIDE * SIDE)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                T::c(v.clamp(0.0, 1.0))
            })
            .collect();
        Probe { seed, z: Tensor::new([PROBE_BATCH, CHANNELS, SIDE, SIDE], data).expect("probe shape") }
    }
}

/// Flattened Eval-mode logits over the probe, `[1, Bp·|Y|]`, on the tape.
pub fn fingerprint_on_tape<T: Scalar>(tape: &mut Tape<T>, net: &Backbone<T>, vars: &[Var], probe: &Probe<T>) -> Result<Var> {
    let z = tape.constant(probe.z.clone());
    let out = net.forward(tape, vars, z, BnMode::Eval)?;
    let n = tape.value(out.logits).numel();
    tape.reshape(out.logits, [1, n])
}

/// Fingerprint of `state` running on `trunk`.
pub fn compute_fingerprint<T: Scalar>(trunk: &Backbone<T>, state: &SubNetworkState<T>, probe: &Probe<T>) -> Result<Tensor<T>> {
    let mut net = trunk.clone();
    net.swap_in(state)?;
    let mut tape = Tape::new();
    let bound = tape.bind(net.parameters());
    let f = fingerprint_on_tape(&mut tape, &net, bound.vars(), probe)?;
    Ok(tape.value(f).clone())
}

/// `𝒮`: dense → ReLU → dense → unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureNet<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

impl<T: Scalar> SignatureNet<T> {
    pub fn new(fingerprint_dim: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SignatureNet { fc1: Dense::new(fingerprint_dim, HIDDEN, &mut rng), fc2: Dense::new(HIDDEN, latent_dim, &mut rng) }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &mut impl Iterator<Item = Var>, f: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, vars, f)?;
        let h = tape.relu(h)?;
        let s = self.fc2.forward(tape, vars, h)?;
        tape.normalize_rows(s)
    }

    /// Unit signatures for fingerprints `[n, F]`.
    pub fn signature(&self, fingerprints: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = tape.bind(self.parameters());
        let f = tape.constant(fingerprints.clone());
        let s = self.forward(&mut tape, &mut bound.cursor(), f)?;
        Ok(tape.value(s).clone())
    }
}

impl<T: Scalar> Module<T> for SignatureNet<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        [self.fc1.params(), self.fc2.params()].concat()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// `Σ_i exp(−S^i·C^i)` for signatures `[d, o]` against constant centroids.
pub fn loss_lcm<T: Scalar>(tape: &mut Tape<T>, s: Var, c: &Tensor<T>) -> Result<Var> {
    let cv = tape.constant(c.clone());
    let prod = tape.mul(s, cv)?;
    let dots = tape.sum_last_axis(prod)?;
    let neg = tape.scale(dots, -T::one())?;
    let e = tape.exp(neg)?;
    tape.sum(e)
}

/// Row-wise softmax of `(S·Cᵀ) / Z` with `Z = Σ_k S^k·C^k`.
pub fn pi_matrix<T: Scalar>(tape: &mut Tape<T>, s: Var, c: &Tensor<T>) -> Result<Var> {
    let logits = pi_logits(tape, s, c)?;
    tape.softmax(logits)
}

fn pi_logits<T: Scalar>(tape: &mut Tape<T>, s: Var, c: &Tensor<T>) -> Result<Var> {
    let cv = tape.constant(c.clone());
    let prod = tape.mul(s, cv)?;
    let z = tape.sum(prod)?;
    if tape.value(z).item().abs() < T::c(1e-9) {
        return Err(Error::DegenerateNormalizer(tape.value(z).item().f64()));
    }
    let ct = tape.constant(transpose(c));
    let sims = tape.matmul(s, ct)?;
    tape.div_scalar(sims, z)
}

fn transpose<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.batch(), m.row_len());
    let d = m.data();
    let data = (0..c * r).map(|k| d[(k % r) * c + k / r]).collect();
    Tensor::new([c, r], data).expect("transpose shape")
}

/// `π` as plain numbers.
pub fn pi_values(s: &[Vec<f64>], c: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let z: f64 = s.iter().zip(c).map(|(a, b)| dot(a, b)).sum();
    if z.abs() < 1e-9 {
        return Err(Error::DegenerateNormalizer(z));
    }
    Ok(s.iter().map(|si| softmax(&c.iter().map(|cj| dot(si, cj) / z).collect::<Vec<_>>())).collect())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Row-wise softmax of normalized surprisals `log(1/(1−a_ij))`.
pub fn alpha_matrix(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    a.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.iter().any(|&v| !(0.0..1.0).contains(&v)) {
                return Err(Error::config(format!("accuracy row {i} has entries outside [0, 1)")));
            }
            let surprisal: Vec<f64> = row.iter().map(|&v| -(1.0 - v).ln()).collect();
            let total: f64 = surprisal.iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateRow(i));
            }
            Ok(softmax(&surprisal.iter().map(|r| r / total).collect::<Vec<_>>()))
        })
        .collect()
}

/// `Σ_i Σ_j π_ij log(π_ij / α_ij)` as plain numbers.
pub fn kl_rows(pi: &[Vec<f64>], alpha: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (p, a)) in pi.iter().zip(alpha).enumerate() {
        for (j, (&pv, &av)) in p.iter().zip(a).enumerate() {
            if pv > 0.0 {
                if av <= 0.0 {
                    return Err(Error::DegenerateSupport(i, j));
                }
                total += pv * (pv / av).ln();
            }
        }
    }
    Ok(total)
}

/// `KL(π ‖ α)` summed over rows, differentiable in the signatures.
pub fn loss_lr<T: Scalar>(tape: &mut Tape<T>, s: Var, c: &Tensor<T>, alpha: &[Vec<f64>]) -> Result<Var> {
    let d = alpha.len();
    let mut log_alpha = Vec::with_capacity(d * d);
    for (i, row) in alpha.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if a <= 0.0 {
                return Err(Error::DegenerateSupport(i, j));
            }
            log_alpha.push(T::c(-a.ln()));
        }
    }
    let logits = pi_logits(tape, s, c)?;
    let pi = tape.softmax(logits)?;
    let log_pi = tape.log_softmax(logits, None)?;
    let ent = tape.mul(pi, log_pi)?;
    let neg_entropy = tape.sum(ent)?;
    let cross = tape.weighted_sum(pi, &Tensor::new([d, d], log_alpha)?)?;
    tape.add(neg_entropy, cross)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignatureTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_r: f64,
    pub seed: u64,
}

impl Default for SignatureTrainConfig {
    fn default() -> Self {
        SignatureTrainConfig { epochs: 1500, lr: 1e-3, lambda_r: 0.2, seed: 0 }
    }
}

/// `ℒ_m = ℒ_CM + λ_r·ℒ_r` on a tape; returns `(ℒ_m, ℒ_CM, ℒ_r)`.
pub fn loss_lm<T: Scalar>(
    tape: &mut Tape<T>,
    net: &SignatureNet<T>,
    vars: &[Var],
    fingerprints: &Tensor<T>,
    centroids: &Tensor<T>,
    alpha: &[Vec<f64>],
    lambda_r: f64,
) -> Result<(Var, Var, Var)> {
    let f = tape.constant(fingerprints.clone());
    let s = net.forward(tape, &mut vars.iter().copied(), f)?;
    let cm = loss_lcm(tape, s, centroids)?;
    let r = loss_lr(tape, s, centroids, alpha)?;
    let rw = tape.scale(r, T::c(lambda_r))?;
    Ok((tape.add(cm, rw)?, cm, r))
}

/// Full-batch Adam on `ℒ_m`; one step per epoch. Centroids stay fixed.
///
/// `π` divides by `Z = Σ_k S^k·C^k`, which is near zero for a fresh net and
/// traps training at `Z ≈ 0` when it starts negative. Steps taken while
/// `Z < WARMUP_NORMALIZER` therefore use `ℒ_CM` alone.
pub fn train_signature_encoder<T: Scalar>(
    net: &mut SignatureNet<T>,
    fingerprints: &Tensor<T>,
    centroids: &Tensor<T>,
    accuracy: &[Vec<f64>],
    cfg: &SignatureTrainConfig,
) -> Result<Vec<f64>> {
    if !(cfg.lambda_r > 0.0 && cfg.lambda_r < 1.0) {
        return Err(Error::config(format!("lambda_r must lie in (0, 1), got {}", cfg.lambda_r)));
    }
    if fingerprints.batch() != centroids.batch() || accuracy.len() != centroids.batch() {
        return Err(Error::shape("fingerprints, centroids and accuracy rows must agree"));
    }
    let alpha = alpha_matrix(accuracy)?;
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let bound = tape.bind(net.parameters());
        let f = tape.constant(fingerprints.clone());
        let sv = net.forward(&mut tape, &mut bound.cursor(), f)?;
        let cm = loss_lcm(&mut tape, sv, centroids)?;
        let z: f64 = tape.value(sv).data().iter().zip(centroids.data()).map(|(a, b)| (*a * *b).f64()).sum();
        let lm = if z < WARMUP_NORMALIZER {
            cm
        } else {
            let r = loss_lr(&mut tape, sv, centroids, &alpha)?;
            let rw = tape.scale(r, T::c(cfg.lambda_r))?;
            tape.add(cm, rw)?
        };
        losses.push(tape.value(lm).item().f64());
        tape.backward(lm)?.accumulate(net.parameters_mut(), &bound);
        adam.step(net.parameters_mut());
    }
    Ok(losses)
}

/// `a_ij` = accuracy of state `i` on held-out domain `j`, clamped.
pub fn compute_accuracy_matrix<T: Scalar>(trunk: &Backbone<T>, states: &[&SubNetworkState<T>], held_out: &[Dataset<T>]) -> Result<Vec<Vec<f64>>> {
    if held_out.iter().any(|d| d.is_empty()) {
        return Err(Error::config("empty held-out split"));
    }
    let mut net = trunk.clone();
    let mut a = Vec::with_capacity(states.len());
    for s in states {
        net.swap_in(s)?;
        let row = held_out.iter().map(|d| net.evaluate(d).map(|v| v.min(1.0 - ACCURACY_EPS))).collect::<Result<Vec<_>>>()?;
        a.push(row);
    }
    Ok(a)
}

/// Accuracy matrix as CSV: rows are sub-networks, columns domains.
pub fn write_accuracy_csv(out: &mut impl Write, names: &[String], a: &[Vec<f64>]) -> std::io::Result<()> {
    write!(out, "subnetwork")?;
    for n in names {
        write!(out, ",{n}")?;
    }
    writeln!(out)?;
    for (n, row) in names.iter().zip(a) {
        write!(out, "{n}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
