//! Encoder `h` over extracted residuals, joint training with `g`, and the
//! per-domain centroid bank.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DomainId, CHANNELS, SIDE};
use crate::error::{Error, Result};
use crate::extractor::{pair_downsample_macs, ExtractorNet, Residuals, HALF};
use crate::nn::{mac_count, Adam, Conv2d, Dense, LayerSpec, Module, Parameter, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::train::{dot, normalized, shuffled_batches};

pub const DEFAULT_LATENT_DIM: usize = 32;
const C1: usize = 16;
const C2: usize = 32;
const FC: usize = 64;

/// `h`: two (conv → ReLU → max-pool) units, two dense layers, unit-norm output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

impl<T: Scalar> EncoderNet<T> {
    pub fn new(latent_dim: usize, rng: &mut impl Rng) -> Self {
        EncoderNet {
            conv1: Conv2d::new(2 * CHANNELS, C1, 3, 1, 1, true, rng),
            conv2: Conv2d::new(C1, C2, 3, 1, 1, true, rng),
            fc1: Dense::new(C2 * (HALF / 4) * (HALF / 4), FC, rng),
            fc2: Dense::new(FC, latent_dim, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.fc2.bias.value.numel()
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &mut impl Iterator<Item = Var>, x_res: Var) -> Result<Var> {
        let mut h = self.conv1.forward(tape, vars, x_res)?;
        h = tape.relu(h)?;
        h = tape.maxpool2d(h, 2, 2)?;
        h = self.conv2.forward(tape, vars, h)?;
        h = tape.relu(h)?;
        h = tape.maxpool2d(h, 2, 2)?;
        h = tape.flatten(h)?;
        h = self.fc1.forward(tape, vars, h)?;
        h = tape.relu(h)?;
        h = self.fc2.forward(tape, vars, h)?;
        tape.normalize_rows(h)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        vec![
            self.conv1.spec(HALF, HALF),
            LayerSpec::Free("relu+pool"),
            self.conv2.spec(HALF / 2, HALF / 2),
            LayerSpec::Free("relu+pool"),
            self.fc1.spec(),
            LayerSpec::Free("relu"),
            self.fc2.spec(),
            LayerSpec::Free("normalize"),
        ]
    }
}

impl<T: Scalar> Module<T> for EncoderNet<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        [self.conv1.params(), self.conv2.params(), self.fc1.params(), self.fc2.params()].concat()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

/// `g` and `h` together: image → unit latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionEncoder<T> {
    pub g: ExtractorNet<T>,
    pub h: EncoderNet<T>,
}

/// Tape values produced by [`CorruptionEncoder::forward`].
pub struct EncoderOutput {
    pub projection: Var,
    pub residuals: Residuals,
}

impl<T: Scalar> CorruptionEncoder<T> {
    pub fn new(latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CorruptionEncoder { g: ExtractorNet::new(&mut rng), h: EncoderNet::new(latent_dim, &mut rng) }
    }

    pub fn latent_dim(&self) -> usize {
        self.h.latent_dim()
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: &Tensor<T>) -> Result<EncoderOutput> {
        let ng = self.g.parameters().len();
        let residuals = Residuals::compute(&self.g, tape, &vars[..ng], x)?;
        let x_res = residuals.features(tape)?;
        let projection = self.h.forward(tape, &mut vars[ng..].iter().copied(), x_res)?;
        Ok(EncoderOutput { projection, residuals })
    }

    /// Unit projections `[B, o]` and the multiply-accumulates spent.
    pub fn project(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        let mut tape = Tape::new();
        let bound = tape.bind(self.parameters());
        let out = self.forward(&mut tape, bound.vars(), x)?;
        let macs = tape.macs() + pair_downsample_macs(x.batch());
        Ok((tape.value(out.projection).clone(), macs))
    }

    /// Projects in chunks to bound peak memory.
    pub fn project_all(&self, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = x.batch();
        let mut parts = Vec::new();
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            parts.push(self.project(&x.select(&idx)?)?.0);
        }
        Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())
    }

    /// Forward multiply-accumulates per sample, analytically.
    pub fn macs_per_sample(&self) -> u64 {
        let g = mac_count(&self.g.layer_specs(), 2).expect("static shapes");
        let h = mac_count(&self.h.layer_specs(), 1).expect("static shapes");
        g + h + pair_downsample_macs(1)
    }
}

impl<T: Scalar> Module<T> for CorruptionEncoder<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = self.g.parameters();
        v.extend(self.h.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.g.parameters_mut();
        v.extend(self.h.parameters_mut());
        v
    }
}

/// The soft augmentations: quarter rotations and flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Augment {
    pub const ALL: [Augment; 5] = [Augment::Rot90, Augment::Rot180, Augment::Rot270, Augment::FlipH, Augment::FlipV];

    /// Source coordinates of output pixel `(i, j)` on an `n×n` grid.
    fn source(self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Augment::Rot90 => (j, m - i),
            Augment::Rot180 => (m - i, m - j),
            Augment::Rot270 => (m - j, i),
            Augment::FlipH => (i, m - j),
            Augment::FlipV => (m - i, j),
        }
    }

    /// Applies to every image of a square `[B, C, n, n]` batch.
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::shape(format!("augmentation needs square images, got {s:?}")));
        }
        let n = s[2];
        let mut out = Vec::with_capacity(x.numel());
        for plane in x.data().chunks(n * n) {
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = self.source(i, j, n);
                    out.push(plane[si * n + sj]);
                }
            }
        }
        Tensor::new(s.to_vec(), out)
    }
}

/// Each image gets one augmentation drawn uniformly from [`Augment::ALL`].
pub fn soft_augment<T: Scalar>(x: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::with_capacity(x.batch());
    for i in 0..x.batch() {
        let a = Augment::ALL[rng.random_range(0..Augment::ALL.len())];
        parts.push(a.apply(&x.select(&[i])?)?);
    }
    Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Supervised contrastive loss over unit projections `[M, o]`. Positives of
/// anchor `i` are the other samples with its label; anchors without
/// positives contribute nothing.
pub fn supcon_loss<T: Scalar>(tape: &mut Tape<T>, projections: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let m = tape.value(projections).batch();
    if labels.len() != m {
        return Err(Error::shape(format!("{} labels for {m} projections", labels.len())));
    }
    if m < 2 {
        return Err(Error::shape("contrastive loss needs at least two samples"));
    }
    let pt = tape.transpose(projections)?;
    let sims = tape.matmul(projections, pt)?;
    let logits = tape.scale(sims, T::c(1.0 / tau))?;
    let mask: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
    let lp = tape.log_softmax(logits, Some(mask))?;
    let mut w = vec![T::zero(); m * m];
    for i in 0..m {
        let pos: Vec<usize> = (0..m).filter(|&j| j != i && labels[j] == labels[i]).collect();
        for &j in &pos {
            w[i * m + j] = T::c(-1.0 / pos.len() as f64);
        }
    }
    tape.weighted_sum(lp, &Tensor::new([m, m], w)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    /// Originals per step; the step sees twice as many with augmentations.
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda_e: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig { epochs: 10, batch_size: 32, lr: 1e-3, tau: 0.1, lambda_e: 10.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderEpoch {
    pub loss: f64,
    pub contrastive: f64,
    pub counterpart: f64,
}

/// Minimizes `L_D + λ_e·L_N` over batches of originals plus one soft
/// augmentation each. Labels are domain ids.
pub fn train_joint<T: Scalar>(
    encoder: &mut CorruptionEncoder<T>,
    domains: &[Dataset<T>],
    cfg: &EncoderTrainConfig,
) -> Result<Vec<EncoderEpoch>> {
    for d in domains {
        d.ensure_seen()?;
    }
    if domains.is_empty() {
        return Err(Error::config("no training domains"));
    }
    let parts: Vec<&Tensor<T>> = domains.iter().map(|d| &d.images).collect();
    let images = Tensor::cat_batch(&parts)?;
    let labels: Vec<usize> = domains.iter().flat_map(|d| std::iter::repeat_n(d.domain().0, d.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = shuffled_batches(labels.len(), cfg.batch_size, &mut rng);
        let mut sums = [0.0; 3];
        for idx in &batches {
            let orig = images.select(idx)?;
            let aug = soft_augment(&orig, rng.random())?;
            let x = Tensor::cat_batch(&[&orig, &aug])?;
            let y: Vec<usize> = idx.iter().chain(idx).map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = tape.bind(encoder.parameters());
            let out = encoder.forward(&mut tape, bound.vars(), &x)?;
            let ld = supcon_loss(&mut tape, out.projection, &y, cfg.tau)?;
            let ln = out.residuals.loss(&mut tape)?;
            let weighted = tape.scale(ln, T::c(cfg.lambda_e))?;
            let loss = tape.add(ld, weighted)?;
            sums[0] += tape.value(loss).item().f64();
            sums[1] += tape.value(ld).item().f64();
            sums[2] += tape.value(ln).item().f64();
            tape.backward(loss)?.accumulate(encoder.parameters_mut(), &bound);
            adam.step(encoder.parameters_mut());
        }
        let n = batches.len() as f64;
        history.push(EncoderEpoch { loss: sums[0] / n, contrastive: sums[1] / n, counterpart: sums[2] / n });
    }
    Ok(history)
}

/// Unit centroids, one per seen domain, ordered by domain id.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank<T> {
    pub domains: Vec<DomainId>,
    pub centroids: Vec<Vec<T>>,
}

/// `normalize(mean(projections))`.
pub fn centroid_of<T: Scalar>(projections: &Tensor<T>, domain: DomainId) -> Result<Vec<T>> {
    if projections.numel() == 0 {
        return Err(Error::config(format!("no projections for {domain}")));
    }
    let o = projections.row_len();
    let mut mean = vec![T::zero(); o];
    for row in projections.data().chunks(o) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    let n = T::c(projections.batch() as f64);
    mean.iter_mut().for_each(|m| *m /= n);
    normalized(&mean).ok_or(Error::DegenerateCentroid(domain.0))
}

impl<T: Scalar> CentroidBank<T> {
    pub fn from_parts(mut parts: Vec<(DomainId, Vec<T>)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::config("centroid bank needs at least one domain"));
        }
        parts.sort_by_key(|p| p.0);
        if parts.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::config("duplicate centroid domain"));
        }
        let dim = parts[0].1.len();
        if parts.iter().any(|p| p.1.len() != dim) {
            return Err(Error::shape("centroids of different dimensions"));
        }
        let (domains, centroids) = parts.into_iter().unzip();
        Ok(CentroidBank { domains, centroids })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn get(&self, d: DomainId) -> Option<&[T]> {
        self.domains.iter().position(|&x| x == d).map(|i| self.centroids[i].as_slice())
    }

    /// Centroids stacked `[d_s, o]` in domain order.
    pub fn matrix(&self) -> Tensor<T> {
        Tensor::new([self.len(), self.centroids[0].len()], self.centroids.concat()).expect("uniform centroid dims")
    }

    /// Similarities to every centroid, in domain order.
    pub fn similarities(&self, c: &[T]) -> Vec<T> {
        self.centroids.iter().map(|k| dot(c, k)).collect()
    }

    /// Most similar centroid; ties go to the lowest domain id.
    pub fn nearest(&self, c: &[T]) -> (DomainId, T) {
        let sims = self.similarities(c);
        let mut best = 0;
        for (i, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = i;
            }
        }
        (self.domains[best], sims[best])
    }
}

pub fn nearest_centroid<T: Scalar>(c: &[T], bank: &CentroidBank<T>) -> (DomainId, T) {
    bank.nearest(c)
}

pub fn compute_centroids<T: Scalar>(encoder: &CorruptionEncoder<T>, domains: &[Dataset<T>]) -> Result<CentroidBank<T>> {
    let mut parts = Vec::with_capacity(domains.len());
    for d in domains {
        d.ensure_seen()?;
        if d.is_empty() {
            return Err(Error::config(format!("domain {} is empty", d.domain())));
        }
        let p = encoder.project_all(&d.images, 128)?;
        parts.push((d.domain(), centroid_of(&p, d.domain())?));
    }
    CentroidBank::from_parts(parts)
}

/// One embedding row for offline plotting.
pub struct EmbeddingRow<'a, T> {
    pub sample_id: usize,
    pub domain: DomainId,
    pub severity: u8,
    pub c: &'a [T],
}

/// CSV with columns `sample_id,domain_id,severity,c_0..c_{o-1}`.
pub fn write_embedding_csv<'a, T: Scalar + 'a>(out: &mut impl Write, rows: impl IntoIterator<Item = EmbeddingRow<'a, T>>) -> std::io::Result<()> {
    let mut header_done = false;
    for r in rows {
        if !header_done {
            write!(out, "sample_id,domain_id,severity")?;
            for k in 0..r.c.len() {
                write!(out, ",c_{k}")?;
            }
            writeln!(out)?;
            header_done = true;
        }
        write!(out, "{},{},{}", r.sample_id, r.domain.0, r.severity)?;
        for v in r.c {
            write!(out, ",{}", v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Image side the encoder is built for.
pub const INPUT_SIDE: usize = SIDE;
