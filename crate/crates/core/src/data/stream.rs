//! Dirichlet-correlated non-IID stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{CorruptionSpec, Dataset, DomainId};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub delta: f64,
    pub sequence: Vec<CorruptionSpec>,
    pub batch_size: usize,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("dirichlet concentration must be positive, got {}", self.delta)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.sequence.is_empty() {
            return Err(Error::config("corruption sequence is empty"));
        }
        self.sequence.iter().try_for_each(|s| s.validate())
    }
}

/// Evaluation-only side channel. Adaptation code receives `pixels` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<usize>,
    pub domain: DomainId,
    pub severity: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch<T> {
    pub pixels: Tensor<T>,
    pub truth: GroundTruth,
}

fn log_gamma_sample(shape: f64, rng: &mut impl Rng) -> f64 {
    // Boosting keeps tiny shapes from underflowing to exact zeros.
    let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    g.ln() + u.ln() / shape
}

/// One `Dirichlet(δ·1_T)` draw per class; `out[class][slot]`.
pub fn dirichlet_schedule(delta: f64, n_classes: usize, slots: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::config(format!("dirichlet concentration must be positive, got {delta}")));
    }
    if slots == 0 {
        return Err(Error::config("at least one slot is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_classes)
        .map(|_| {
            let logs: Vec<f64> = (0..slots).map(|_| log_gamma_sample(delta, &mut rng)).collect();
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Largest-remainder split of `n` items by `props`.
fn apportion(n: usize, props: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Sample order for one domain: classes spread over `T = ⌈len / N⌉` slots by
/// the Dirichlet schedule, shuffled within each slot.
pub fn schedule_order(labels: &[usize], n_classes: usize, delta: f64, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    let slots = labels.len().div_ceil(batch_size);
    let props = dirichlet_schedule(delta, n_classes, slots, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5107_5107);
    let mut per_slot: Vec<Vec<usize>> = vec![Vec::new(); slots];
    for (class, p) in props.iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), p);
        let mut it = members.into_iter();
        for (slot, count) in per_slot.iter_mut().zip(counts) {
            slot.extend(it.by_ref().take(count));
        }
    }
    for slot in per_slot.iter_mut() {
        slot.shuffle(&mut rng);
    }
    Ok(per_slot.concat())
}

/// Corrupts a copy of `base` for each spec in turn and cuts it into batches.
/// Batches never straddle two domains.
pub fn build_stream<T: Scalar>(config: &StreamConfig, base: &Dataset<T>) -> Result<Vec<StreamBatch<T>>> {
    config.validate()?;
    if base.len() < config.batch_size {
        return Err(Error::config(format!("{} samples cannot fill a batch of {}", base.len(), config.batch_size)));
    }
    let mut out = Vec::new();
    for (k, spec) in config.sequence.iter().enumerate() {
        let domain_seed = config.seed.wrapping_add(1 + k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let data = base.corrupted(*spec, domain_seed)?;
        let order = schedule_order(&data.labels, data.n_classes, config.delta, config.batch_size, domain_seed ^ 1)?;
        for chunk in order.chunks(config.batch_size) {
            out.push(StreamBatch {
                pixels: data.images.select(chunk)?,
                truth: GroundTruth {
                    labels: chunk.iter().map(|&i| data.labels[i]).collect(),
                    domain: spec.kind.domain(),
                    severity: spec.severity,
                },
            });
        }
    }
    Ok(out)
}
