//! Training stages and their on-disk artifacts.
//!
//! Each stage has an in-memory form (`*_stage`) and a disk form that loads
//! its prerequisites from the output directory and writes one checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::backbone::{fine_tune_subnetwork, train_backbone, Backbone, SubNetworkState};
use crate::bank::Bank;
use crate::data::cifar::load_cifar_binary;
use crate::data::glyphs::generate_glyphs;
use crate::data::{CorruptionKind, CorruptionSpec, Dataset, DomainId, CHANNELS, SIDE};
use crate::encoder::{compute_centroids, train_joint, write_embedding_csv, CentroidBank, CorruptionEncoder, EmbeddingRow, EncoderEpoch};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::nn::{Module, Parameter, Tensor};
use crate::runtime::Models;
use crate::scalar::Scalar;
use crate::signature::{compute_accuracy_matrix, train_signature_encoder, write_accuracy_csv, Probe, SignatureNet, PROBE_BATCH};

pub const DATA_FILE: &str = "data.dkpt";
pub const BACKBONE_FILE: &str = "backbone.dkpt";
pub const SUBNETS_FILE: &str = "subnets.dkpt";
pub const ENCODER_FILE: &str = "encoder.dkpt";
pub const SIGNET_FILE: &str = "signet.dkpt";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainBackbone,
    TrainSubnets,
    TrainEncoders,
    TrainSignet,
    RunStream,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::GenData, Stage::TrainBackbone, Stage::TrainSubnets, Stage::TrainEncoders, Stage::TrainSignet, Stage::RunStream, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBackbone => "train-backbone",
            Stage::TrainSubnets => "train-subnets",
            Stage::TrainEncoders => "train-encoders",
            Stage::TrainSignet => "train-signet",
            Stage::RunStream => "run-stream",
            Stage::Report => "report",
        }
    }

    /// Checkpoint written by the stage, if any.
    pub fn artifact(self) -> Option<&'static str> {
        match self {
            Stage::GenData => Some(DATA_FILE),
            Stage::TrainBackbone => Some(BACKBONE_FILE),
            Stage::TrainSubnets => Some(SUBNETS_FILE),
            Stage::TrainEncoders => Some(ENCODER_FILE),
            Stage::TrainSignet => Some(SIGNET_FILE),
            Stage::RunStream | Stage::Report => None,
        }
    }

    /// Stages whose artifacts must exist first, in pipeline order.
    pub fn prerequisites(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenData => &[],
            TrainBackbone => &[GenData],
            TrainSubnets => &[GenData, TrainBackbone],
            TrainEncoders => &[GenData],
            TrainSignet => &[GenData, TrainBackbone, TrainSubnets, TrainEncoders],
            RunStream | Report => &[GenData, TrainBackbone, TrainSubnets, TrainEncoders, TrainSignet],
        }
    }
}

/// Output directory holding every artifact of one experiment.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    /// Fails with `MissingArtifact` naming the first stage still to run.
    pub fn require(&self, stage: Stage) -> Result<()> {
        for &pre in stage.prerequisites() {
            let name = pre.artifact().expect("prerequisites write artifacts");
            let path = self.path(name);
            if !path.is_file() {
                return Err(Error::MissingArtifact { artifact: path, stage: pre.name() });
            }
        }
        Ok(())
    }

    pub fn load(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.path(name))
    }

    pub fn save(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        self.create()?;
        ck.save(&self.path(name))
    }

    pub fn write_text(&self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
        self.create()?;
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    }
}

/// SplitMix64 finalizer over `seed + tag`; decorrelates the per-stage seeds.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod tag {
    pub const TRAIN_IMAGES: u64 = 1;
    pub const SUBNET_IMAGES: u64 = 2;
    pub const ENCODER_IMAGES: u64 = 3;
    pub const HELDOUT_IMAGES: u64 = 4;
    pub const TEST_IMAGES: u64 = 5;
    pub const BACKBONE: u64 = 6;
    pub const SUBNET: u64 = 7;
    pub const SUBNET_CORRUPT: u64 = 8;
    pub const ENCODER: u64 = 9;
    pub const ENCODER_CORRUPT: u64 = 10;
    pub const HELDOUT_CORRUPT: u64 = 11;
    pub const PROBE: u64 = 12;
    pub const SIGNET: u64 = 13;
}

/// Clean image splits. Corrupted domains are derived from these on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits<T> {
    pub train: Dataset<T>,
    pub subnet: Dataset<T>,
    pub encoder: Dataset<T>,
    pub heldout: Dataset<T>,
    pub test: Dataset<T>,
}

const SPLITS: [&str; 5] = ["train", "subnet", "encoder", "heldout", "test"];

/// First `counts[k]` samples of every class, taken in file order, as
/// consecutive disjoint blocks.
fn take_per_class<T: Scalar>(data: &Dataset<T>, counts: &[usize]) -> Result<Vec<Dataset<T>>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let need: usize = counts.iter().sum();
    if let Some((c, have)) = by_class.iter().enumerate().map(|(c, v)| (c, v.len())).find(|&(_, n)| n < need) {
        return Err(Error::config(format!("class {c} has {have} images, the splits need {need}")));
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut idx: Vec<usize> = by_class.iter().flat_map(|v| v[start..start + n].iter().copied()).collect();
        idx.sort_unstable();
        out.push(data.subset(&idx)?);
        start += n;
    }
    Ok(out)
}

impl<T: Scalar> DataSplits<T> {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.dataset;
        let s = cfg.seed;
        let glyphs = |t: u64, n: usize| generate_glyphs::<T>(sub_seed(s, t), n, d.n_classes);
        let (train, subnet, encoder, heldout) = match &d.cifar_train {
            Some(path) => {
                let all = load_cifar_binary::<T>(path)?;
                let mut parts = take_per_class(&all, &[d.train_per_class, d.subnet_per_class, d.encoder_per_class, d.heldout_per_class])?.into_iter();
                let mut next = || parts.next().expect("four parts");
                (next(), next(), next(), next())
            }
            None => (
                glyphs(tag::TRAIN_IMAGES, d.train_per_class)?,
                glyphs(tag::SUBNET_IMAGES, d.subnet_per_class)?,
                glyphs(tag::ENCODER_IMAGES, d.encoder_per_class)?,
                glyphs(tag::HELDOUT_IMAGES, d.heldout_per_class)?,
            ),
        };
        let test = match &d.cifar_test {
            Some(path) => take_per_class(&load_cifar_binary::<T>(path)?, &[d.test_per_class])?.remove(0),
            None if d.cifar_train.is_some() => return Err(Error::config("dataset.cifar_test is required with dataset.cifar_train")),
            None => glyphs(tag::TEST_IMAGES, d.test_per_class)?,
        };
        Ok(DataSplits { train, subnet, encoder, heldout, test })
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes
    }

    fn splits(&self) -> [&Dataset<T>; 5] {
        [&self.train, &self.subnet, &self.encoder, &self.heldout, &self.test]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_f64("meta/n_classes", &[self.n_classes() as f64])?;
        for (name, d) in SPLITS.iter().zip(self.splits()) {
            ck.put(format!("{name}/images"), &d.images)?;
            ck.put_f64(format!("{name}/labels"), &d.labels.iter().map(|&y| y as f64).collect::<Vec<_>>())?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let n_classes = meta_usize(ck, "meta/n_classes")?;
        let read = |name: &str| -> Result<Dataset<T>> {
            let images = ck.get::<T>(&format!("{name}/images"))?;
            let labels = ck.get_f64(&format!("{name}/labels"))?.into_iter().map(|v| v as usize).collect();
            Dataset::new(images, labels, n_classes, CorruptionSpec::clean()).map_err(|e| Error::CorruptData(format!("{name}: {e}")))
        };
        Ok(DataSplits { train: read("train")?, subnet: read("subnet")?, encoder: read("encoder")?, heldout: read("heldout")?, test: read("test")? })
    }
}

fn meta_usize(ck: &Checkpoint, name: &str) -> Result<usize> {
    let v = ck.get_f64(name)?;
    match v.as_slice() {
        [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
        _ => Err(Error::CorruptData(format!("{name} is not a count"))),
    }
}

/// `base` corrupted once per spec, each with its own derived seed.
pub fn corrupt_domains<T: Scalar>(base: &Dataset<T>, specs: &[CorruptionSpec], seed: u64) -> Result<Vec<Dataset<T>>> {
    specs.iter().map(|s| base.corrupted(*s, sub_seed(seed, s.kind.domain().0 as u64))).collect()
}

fn put_params<T: Scalar>(ck: &mut Checkpoint, prefix: &str, params: Vec<&Parameter<T>>) -> Result<()> {
    for (i, p) in params.into_iter().enumerate() {
        ck.put(format!("{prefix}/p{i}"), &p.value)?;
    }
    Ok(())
}

fn load_tensor_into<T: Scalar>(ck: &Checkpoint, name: &str, dst: &mut Tensor<T>) -> Result<()> {
    let t = ck.get::<T>(name)?;
    if t.shape() != dst.shape() {
        return Err(Error::CorruptData(format!("{name} has shape {:?}, expected {:?}", t.shape(), dst.shape())));
    }
    *dst = t;
    Ok(())
}

fn load_params<T: Scalar>(ck: &Checkpoint, prefix: &str, params: Vec<&mut Parameter<T>>) -> Result<()> {
    for (i, p) in params.into_iter().enumerate() {
        load_tensor_into(ck, &format!("{prefix}/p{i}"), &mut p.value)?;
    }
    Ok(())
}

fn load_vec<T: Scalar>(ck: &Checkpoint, name: &str, dst: &mut Vec<T>) -> Result<()> {
    let v = ck.get::<T>(name)?.into_data();
    if v.len() != dst.len() {
        return Err(Error::CorruptData(format!("{name} has {} values, expected {}", v.len(), dst.len())));
    }
    *dst = v;
    Ok(())
}

fn put_state<T: Scalar>(ck: &mut Checkpoint, prefix: &str, s: &SubNetworkState<T>) -> Result<()> {
    put_params(ck, prefix, s.parameters())?;
    for (l, bn) in s.bns.iter().enumerate() {
        ck.put(format!("{prefix}/bn{l}/mean"), &Tensor::new([bn.running_mean.len()], bn.running_mean.clone())?)?;
        ck.put(format!("{prefix}/bn{l}/var"), &Tensor::new([bn.running_var.len()], bn.running_var.clone())?)?;
    }
    ck.put_f64(format!("{prefix}/origin"), &[s.origin.0 as f64])
}

fn load_state<T: Scalar>(ck: &Checkpoint, prefix: &str, template: &SubNetworkState<T>) -> Result<SubNetworkState<T>> {
    let mut s = template.clone();
    s.fingerprint = None;
    s.signature = None;
    load_params(ck, prefix, s.parameters_mut())?;
    for (l, bn) in s.bns.iter_mut().enumerate() {
        load_vec(ck, &format!("{prefix}/bn{l}/mean"), &mut bn.running_mean)?;
        load_vec(ck, &format!("{prefix}/bn{l}/var"), &mut bn.running_var)?;
    }
    s.origin = DomainId(meta_usize(ck, &format!("{prefix}/origin"))?);
    Ok(s)
}

pub fn backbone_to_checkpoint<T: Scalar>(net: &Backbone<T>, losses: &[f64]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.put_f64("meta/n_classes", &[net.n_classes() as f64])?;
    if !losses.is_empty() {
        ck.put_f64("meta/losses", losses)?;
    }
    put_params(&mut ck, "trunk", net.trunk_parameters())?;
    put_state(&mut ck, "state", &net.state)?;
    Ok(ck)
}

/// The returned network has its trunk frozen.
pub fn backbone_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Backbone<T>> {
    let mut net = Backbone::<T>::new(meta_usize(ck, "meta/n_classes")?, 0);
    let n_trunk = net.trunk_parameters().len();
    let trunk: Vec<&mut Parameter<T>> = net.parameters_mut().into_iter().take(n_trunk).collect();
    load_params(ck, "trunk", trunk)?;
    net.state = load_state(ck, "state", &net.state)?;
    net.freeze_trunk();
    Ok(net)
}

pub fn states_to_checkpoint<T: Scalar>(states: &[SubNetworkState<T>]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.put_f64("meta/domains", &states.iter().map(|s| s.origin.0 as f64).collect::<Vec<_>>())?;
    for s in states {
        put_state(&mut ck, &format!("subnet/{}", s.origin.0), s)?;
    }
    Ok(ck)
}

pub fn states_from_checkpoint<T: Scalar>(ck: &Checkpoint, template: &Backbone<T>) -> Result<Vec<SubNetworkState<T>>> {
    ck.get_f64("meta/domains")?.into_iter().map(|d| load_state(ck, &format!("subnet/{}", d as usize), &template.state)).collect()
}

/// Encoder weights, centroids and training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderArtifacts<T> {
    pub encoder: CorruptionEncoder<T>,
    pub centroids: CentroidBank<T>,
    pub history: Vec<EncoderEpoch>,
}

impl<T: Scalar> EncoderArtifacts<T> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_f64("meta/latent_dim", &[self.encoder.latent_dim() as f64])?;
        put_params(&mut ck, "encoder", self.encoder.parameters())?;
        ck.put_f64("centroids/domains", &self.centroids.domains.iter().map(|d| d.0 as f64).collect::<Vec<_>>())?;
        ck.put("centroids/matrix", &self.centroids.matrix())?;
        if !self.history.is_empty() {
            let cols = |f: fn(&EncoderEpoch) -> f64| self.history.iter().map(f).collect::<Vec<_>>();
            ck.put_f64("meta/loss", &cols(|e| e.loss))?;
            ck.put_f64("meta/contrastive", &cols(|e| e.contrastive))?;
            ck.put_f64("meta/counterpart", &cols(|e| e.counterpart))?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut encoder = CorruptionEncoder::<T>::new(meta_usize(ck, "meta/latent_dim")?, 0);
        load_params(ck, "encoder", encoder.parameters_mut())?;
        let domains: Vec<DomainId> = ck.get_f64("centroids/domains")?.into_iter().map(|d| DomainId(d as usize)).collect();
        let m = ck.get::<T>("centroids/matrix")?;
        if m.rank() != 2 || m.batch() != domains.len() || m.row_len() != encoder.latent_dim() {
            return Err(Error::CorruptData(format!("centroid matrix has shape {:?}", m.shape())));
        }
        let parts = domains.iter().enumerate().map(|(i, &d)| (d, m.row(i).to_vec())).collect();
        let centroids = CentroidBank::from_parts(parts).map_err(|e| Error::CorruptData(e.to_string()))?;
        let history = match (ck.get_f64("meta/loss"), ck.get_f64("meta/contrastive"), ck.get_f64("meta/counterpart")) {
            (Ok(l), Ok(c), Ok(n)) => l.into_iter().zip(c).zip(n).map(|((loss, contrastive), counterpart)| EncoderEpoch { loss, contrastive, counterpart }).collect(),
            _ => Vec::new(),
        };
        Ok(EncoderArtifacts { encoder, centroids, history })
    }
}

/// Signature encoder, probe, and the calibration data it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct SignetArtifacts<T> {
    pub probe: Probe<T>,
    pub signet: SignatureNet<T>,
    /// Rows and columns follow `domains`.
    pub accuracy: Vec<Vec<f64>>,
    pub domains: Vec<DomainId>,
    pub fingerprints: Tensor<T>,
    pub losses: Vec<f64>,
}

impl<T: Scalar> SignetArtifacts<T> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_f64("meta/dims", &[self.fingerprints.row_len() as f64, self.signet.fc2.weight.value.shape()[1] as f64])?;
        ck.put_f64("meta/probe_seed", &[(self.probe.seed >> 32) as f64, (self.probe.seed & 0xFFFF_FFFF) as f64])?;
        ck.put("probe/z", &self.probe.z)?;
        put_params(&mut ck, "signet", self.signet.parameters())?;
        ck.put_f64("meta/domains", &self.domains.iter().map(|d| d.0 as f64).collect::<Vec<_>>())?;
        ck.put_f64("accuracy", &self.accuracy.concat())?;
        ck.put("fingerprints", &self.fingerprints)?;
        if !self.losses.is_empty() {
            ck.put_f64("meta/losses", &self.losses)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dims = ck.get_f64("meta/dims")?;
        let [f, o] = dims[..] else { return Err(Error::CorruptData("meta/dims needs two values".into())) };
        let mut signet = SignatureNet::<T>::new(f as usize, o as usize, 0);
        load_params(ck, "signet", signet.parameters_mut())?;
        let seed = ck.get_f64("meta/probe_seed")?;
        let [hi, lo] = seed[..] else { return Err(Error::CorruptData("meta/probe_seed needs two values".into())) };
        let z = ck.get::<T>("probe/z")?;
        if z.shape() != [PROBE_BATCH, CHANNELS, SIDE, SIDE] {
            return Err(Error::CorruptData(format!("probe has shape {:?}", z.shape())));
        }
        let probe = Probe { seed: ((hi as u64) << 32) | lo as u64, z };
        let domains: Vec<DomainId> = ck.get_f64("meta/domains")?.into_iter().map(|d| DomainId(d as usize)).collect();
        let flat = ck.get_f64("accuracy")?;
        if flat.len() != domains.len() * domains.len() {
            return Err(Error::CorruptData("accuracy matrix does not match the domain list".into()));
        }
        let accuracy = flat.chunks(domains.len()).map(<[f64]>::to_vec).collect();
        let fingerprints = ck.get::<T>("fingerprints")?;
        let losses = ck.get_f64("meta/losses").unwrap_or_default();
        Ok(SignetArtifacts { probe, signet, accuracy, domains, fingerprints, losses })
    }
}

pub fn backbone_stage<T: Scalar>(cfg: &ExperimentConfig, data: &DataSplits<T>) -> Result<(Backbone<T>, Vec<f64>)> {
    train_backbone(&data.train, &cfg.backbone.with_seed(sub_seed(cfg.seed, tag::BACKBONE)))
}

/// Seen-domain fine-tuning sets, clean first.
pub fn subnet_domains<T: Scalar>(cfg: &ExperimentConfig, data: &DataSplits<T>) -> Result<Vec<Dataset<T>>> {
    corrupt_domains(&data.subnet, &cfg.seen_specs(), sub_seed(cfg.seed, tag::SUBNET_CORRUPT))
}

/// One state per seen domain. The clean state is the backbone's own.
pub fn subnets_stage<T: Scalar>(cfg: &ExperimentConfig, data: &DataSplits<T>, backbone: &Backbone<T>) -> Result<Vec<SubNetworkState<T>>> {
    let mut states = Vec::new();
    for d in subnet_domains(cfg, data)? {
        if d.corruption.kind == CorruptionKind::Clean {
            states.push(backbone.state.clone());
            continue;
        }
        let tc = cfg.subnet.with_seed(sub_seed(cfg.seed, tag::SUBNET ^ ((d.domain().0 as u64) << 8)));
        states.push(fine_tune_subnetwork(backbone, &d, &tc)?);
    }
    Ok(states)
}

pub fn encoder_domains<T: Scalar>(cfg: &ExperimentConfig, data: &DataSplits<T>) -> Result<Vec<Dataset<T>>> {
    corrupt_domains(&data.encoder, &cfg.seen_specs(), sub_seed(cfg.seed, tag::ENCODER_CORRUPT))
}

pub fn encoder_stage<T: Scalar>(cfg: &ExperimentConfig, data: &DataSplits<T>) -> Result<EncoderArtifacts<T>> {
    let domains = encoder_domains(cfg, data)?;
    let mut encoder = CorruptionEncoder::new(cfg.encoder.latent_dim, sub_seed(cfg.seed, tag::ENCODER));
    let history = train_joint(&mut encoder, &domains, &cfg.encoder.with_seed(sub_seed(cfg.seed, tag::ENCODER ^ 1)))?;
    let centroids = compute_centroids(&encoder, &domains)?;
    Ok(EncoderArtifacts { encoder, centroids, history })
}

/// Held-out copies of every configured domain, seen first, each in id order.
pub fn heldout_domains<T: Scalar>(cfg: &ExperimentConfig, data: &DataSplits<T>) -> Result<Vec<Dataset<T>>> {
    let mut specs = cfg.seen_specs();
    specs.extend(cfg.unseen_specs());
    corrupt_domains(&data.heldout, &specs, sub_seed(cfg.seed, tag::HELDOUT_CORRUPT))
}

pub fn signet_stage<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &DataSplits<T>,
    trunk: &Backbone<T>,
    states: &[SubNetworkState<T>],
    centroids: &CentroidBank<T>,
) -> Result<SignetArtifacts<T>> {
    let seen: Vec<Dataset<T>> = heldout_domains(cfg, data)?.into_iter().filter(|d| d.domain().is_seen()).collect();
    let domains: Vec<DomainId> = seen.iter().map(|d| d.domain()).collect();
    let ordered: Vec<&SubNetworkState<T>> = domains
        .iter()
        .map(|&d| states.iter().find(|s| s.origin == d).ok_or_else(|| Error::NotFound(format!("sub-network for {d}"))))
        .collect::<Result<_>>()?;
    if centroids.domains != domains {
        return Err(Error::config("encoder centroids and sub-networks cover different domains"));
    }
    let accuracy = compute_accuracy_matrix(trunk, &ordered, &seen)?;
    let probe = Probe::new(sub_seed(cfg.seed, tag::PROBE));
    let mut bank = Bank::new(trunk.clone(), ordered.into_iter().cloned().collect())?;
    bank.attach_fingerprints(&probe)?;
    let fingerprints = bank.fingerprint_matrix()?;
    let mut signet = SignatureNet::new(fingerprints.row_len(), cfg.encoder.latent_dim, sub_seed(cfg.seed, tag::SIGNET));
    let losses = train_signature_encoder(&mut signet, &fingerprints, &centroids.matrix(), &accuracy, &cfg.signature.with_seed(sub_seed(cfg.seed, tag::SIGNET ^ 1)))?;
    Ok(SignetArtifacts { probe, signet, accuracy, domains, fingerprints, losses })
}

/// Assembles the runtime models; fingerprints are re-derived and must match
/// the stored ones bitwise.
pub fn assemble_models<T: Scalar>(
    trunk: &Backbone<T>,
    states: Vec<SubNetworkState<T>>,
    enc: &EncoderArtifacts<T>,
    sig: &SignetArtifacts<T>,
) -> Result<Models<T>> {
    let mut bank = Bank::new(trunk.clone(), states)?;
    bank.attach_fingerprints(&sig.probe)?;
    if bank.fingerprint_matrix()? != sig.fingerprints {
        return Err(Error::CorruptData("stored fingerprints do not match the sub-networks".into()));
    }
    bank.attach_signatures(&sig.signet)?;
    Ok(Models { encoder: enc.encoder.clone(), centroids: enc.centroids.clone(), signet: sig.signet.clone(), probe: sig.probe.clone(), bank })
}

/// Everything the offline stages produce, held in memory.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub data: DataSplits<T>,
    pub backbone: Backbone<T>,
    pub backbone_losses: Vec<f64>,
    pub states: Vec<SubNetworkState<T>>,
    pub encoder: EncoderArtifacts<T>,
    pub signet: SignetArtifacts<T>,
    pub models: Models<T>,
}

impl<T: Scalar> Trained<T> {
    pub fn train(cfg: &ExperimentConfig) -> Result<Self> {
        let data = DataSplits::generate(cfg)?;
        let (backbone, backbone_losses) = backbone_stage(cfg, &data)?;
        let states = subnets_stage(cfg, &data, &backbone)?;
        let encoder = encoder_stage(cfg, &data)?;
        let signet = signet_stage(cfg, &data, &backbone, &states, &encoder.centroids)?;
        let models = assemble_models(&backbone, states.clone(), &encoder, &signet)?;
        Ok(Trained { data, backbone, backbone_losses, states, encoder, signet, models })
    }

    pub fn load(ws: &Workspace) -> Result<Self> {
        ws.require(Stage::RunStream)?;
        let data = DataSplits::from_checkpoint(&ws.load(DATA_FILE)?)?;
        let bck = ws.load(BACKBONE_FILE)?;
        let backbone = backbone_from_checkpoint(&bck)?;
        let backbone_losses = bck.get_f64("meta/losses").unwrap_or_default();
        let states = states_from_checkpoint(&ws.load(SUBNETS_FILE)?, &backbone)?;
        let encoder = EncoderArtifacts::from_checkpoint(&ws.load(ENCODER_FILE)?)?;
        let signet = SignetArtifacts::from_checkpoint(&ws.load(SIGNET_FILE)?)?;
        let models = assemble_models(&backbone, states.clone(), &encoder, &signet)?;
        Ok(Trained { data, backbone, backbone_losses, states, encoder, signet, models })
    }
}

pub fn run_gen_data<T: Scalar>(cfg: &ExperimentConfig, ws: &Workspace) -> Result<DataSplits<T>> {
    let data = DataSplits::<T>::generate(cfg)?;
    ws.save(DATA_FILE, &data.to_checkpoint()?)?;
    Ok(data)
}

fn load_data<T: Scalar>(ws: &Workspace) -> Result<DataSplits<T>> {
    DataSplits::from_checkpoint(&ws.load(DATA_FILE)?)
}

pub fn run_train_backbone<T: Scalar>(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<f64>> {
    ws.require(Stage::TrainBackbone)?;
    let data = load_data::<T>(ws)?;
    let (net, losses) = backbone_stage(cfg, &data)?;
    ws.save(BACKBONE_FILE, &backbone_to_checkpoint(&net, &losses)?)?;
    Ok(losses)
}

pub fn run_train_subnets<T: Scalar>(cfg: &ExperimentConfig, ws: &Workspace) -> Result<usize> {
    ws.require(Stage::TrainSubnets)?;
    let data = load_data::<T>(ws)?;
    let backbone = backbone_from_checkpoint::<T>(&ws.load(BACKBONE_FILE)?)?;
    let states = subnets_stage(cfg, &data, &backbone)?;
    ws.save(SUBNETS_FILE, &states_to_checkpoint(&states)?)?;
    Ok(states.len())
}

/// Also dumps held-out projections of every configured domain.
pub fn run_train_encoders<T: Scalar>(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<EncoderEpoch>> {
    ws.require(Stage::TrainEncoders)?;
    let data = load_data::<T>(ws)?;
    let art = encoder_stage(cfg, &data)?;
    ws.save(ENCODER_FILE, &art.to_checkpoint()?)?;
    let mut projections = Vec::new();
    for d in heldout_domains(cfg, &data)? {
        projections.push((d.domain(), d.corruption.severity, art.encoder.project_all(&d.images, 128)?));
    }
    ws.write_text(EMBEDDINGS_CSV, |w| {
        let rows = projections.iter().flat_map(|(domain, severity, p)| {
            (0..p.batch()).map(move |i| EmbeddingRow { sample_id: i, domain: *domain, severity: *severity, c: p.row(i) })
        });
        write_embedding_csv(w, rows)
    })?;
    Ok(art.history)
}

/// Also writes the accuracy matrix as CSV.
pub fn run_train_signet<T: Scalar>(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<f64>> {
    ws.require(Stage::TrainSignet)?;
    let data = load_data::<T>(ws)?;
    let backbone = backbone_from_checkpoint::<T>(&ws.load(BACKBONE_FILE)?)?;
    let states = states_from_checkpoint(&ws.load(SUBNETS_FILE)?, &backbone)?;
    let enc = EncoderArtifacts::<T>::from_checkpoint(&ws.load(ENCODER_FILE)?)?;
    let art = signet_stage(cfg, &data, &backbone, &states, &enc.centroids)?;
    ws.save(SIGNET_FILE, &art.to_checkpoint()?)?;
    let names: Vec<String> = art.domains.iter().map(|d| d.to_string()).collect();
    ws.write_text(ACCURACY_CSV, |w| write_accuracy_csv(w, &names, &art.accuracy))?;
    Ok(art.losses)
}

pub fn metrics_file(method_name: &str) -> String {
    format!("metrics_{method_name}.csv")
}
