//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a complete configuration.
//! Unknown keys are rejected to catch typos.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 0 |
//! | `method` | `"darda"` |
//! | `dataset.n_classes` | 8 |
//! | `dataset.train_per_class` | 256 |
//! | `dataset.subnet_per_class` | 64 |
//! | `dataset.encoder_per_class` | 64 |
//! | `dataset.heldout_per_class` | 16 |
//! | `dataset.test_per_class` | 128 |
//! | `dataset.cifar_train` / `dataset.cifar_test` | unset (use glyphs) |
//! | `backbone.epochs` / `batch_size` / `lr` | 20 / 64 / 1e-3 |
//! | `subnet.epochs` / `batch_size` / `lr` | 20 / 64 / 1e-3 |
//! | `encoder.latent_dim` | 32 |
//! | `encoder.tau` | 0.1 |
//! | `encoder.lambda_e` | 10 |
//! | `encoder.epochs` / `batch_size` / `lr` | 20 / 64 / 1e-3 |
//! | `signature.lambda_r` | 0.2 |
//! | `signature.epochs` / `lr` | 1500 / 1e-3 |
//! | `corruptions.severity` | 5 |
//! | `corruptions.seen` | clean and the eight seen kinds |
//! | `corruptions.unseen` | the three unseen kinds |
//! | `adaptation.momentum` | 0.5 |
//! | `adaptation.phi_thresh` | 0.005 |
//! | `adaptation.lr` | 1e-3 |
//! | `adaptation.steps_per_trigger` | 1 |
//! | `adaptation.margin` | 0.05 |
//! | `adaptation.patience` | 1 |
//! | `adaptation.memory_capacity` | 64 |
//! | `stream.delta` | 0.1 |
//! | `stream.batch_size` | 64 |
//! | `stream.sequence` | each unseen kind at `corruptions.severity`, then clean |
//!
//! The reference hyperparameters are δ = 0.1, N = 64, m = 0.5, φ = 0.005,
//! λ_e = 10, λ_r = 0.2 and 20 fine-tuning epochs. τ = 0.1 and the latent
//! width o = 32 are small-scale choices.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::TrainConfig;
use crate::data::corruption::MAX_SEVERITY;
use crate::data::{CorruptionKind, CorruptionSpec, StreamConfig};
use crate::encoder::EncoderTrainConfig;
use crate::error::{Error, Result};
use crate::runtime::{AdaptationConfig, Method};
use crate::signature::SignatureTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_classes: usize,
    pub train_per_class: usize,
    /// Clean base images per class, corrupted once per seen domain for fine-tuning.
    pub subnet_per_class: usize,
    pub encoder_per_class: usize,
    /// Used for the accuracy matrix and the held-out clustering check.
    pub heldout_per_class: usize,
    pub test_per_class: usize,
    /// CIFAR-10 binary batch replacing the generated training images.
    pub cifar_train: Option<PathBuf>,
    /// CIFAR-10 binary batch replacing the generated test images.
    pub cifar_test: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_classes: 8,
            train_per_class: 256,
            subnet_per_class: 64,
            encoder_per_class: 64,
            heldout_per_class: 16,
            test_per_class: 128,
            cifar_train: None,
            cifar_test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 20, batch_size: 64, lr: 1e-3 }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub latent_dim: usize,
    pub tau: f64,
    pub lambda_e: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { latent_dim: 32, tau: 0.1, lambda_e: 10.0, epochs: 20, batch_size: 64, lr: 1e-3 }
    }
}

impl EncoderSection {
    pub fn with_seed(&self, seed: u64) -> EncoderTrainConfig {
        EncoderTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            tau: self.tau,
            lambda_e: self.lambda_e,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignatureSection {
    pub lambda_r: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SignatureSection {
    fn default() -> Self {
        SignatureSection { lambda_r: 0.2, epochs: 1500, lr: 1e-3 }
    }
}

impl SignatureSection {
    pub fn with_seed(&self, seed: u64) -> SignatureTrainConfig {
        SignatureTrainConfig { epochs: self.epochs, lr: self.lr, lambda_r: self.lambda_r, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSection {
    /// Severity used for every seen domain and the default stream.
    pub severity: u8,
    pub seen: Vec<CorruptionKind>,
    pub unseen: Vec<CorruptionKind>,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection { severity: MAX_SEVERITY, seen: CorruptionKind::seen().to_vec(), unseen: CorruptionKind::unseen().to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    /// Dirichlet concentration of the label schedule.
    pub delta: f64,
    pub batch_size: usize,
    /// Empty means: every unseen kind, then clean.
    pub sequence: Vec<CorruptionSpec>,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection { delta: 0.1, batch_size: 64, sequence: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub dataset: DatasetSection,
    pub backbone: TrainSection,
    pub subnet: TrainSection,
    pub encoder: EncoderSection,
    pub signature: SignatureSection,
    pub corruptions: CorruptionSection,
    pub adaptation: AdaptationConfig,
    pub stream: StreamSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            method: Method::Darda,
            dataset: DatasetSection::default(),
            backbone: TrainSection::default(),
            subnet: TrainSection::default(),
            encoder: EncoderSection::default(),
            signature: SignatureSection::default(),
            corruptions: CorruptionSection::default(),
            adaptation: AdaptationConfig::default(),
            stream: StreamSection::default(),
        }
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{path} must be positive, got {v}")))
    }
}

fn nonzero(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(format!("{path} must be at least 1")))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stream_sequence(&self) -> Vec<CorruptionSpec> {
        if !self.stream.sequence.is_empty() {
            return self.stream.sequence.clone();
        }
        let severity = self.corruptions.severity;
        let mut seq: Vec<CorruptionSpec> = self.corruptions.unseen.iter().map(|&kind| CorruptionSpec { kind, severity }).collect();
        seq.push(CorruptionSpec::clean());
        seq
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            delta: self.stream.delta,
            sequence: self.stream_sequence(),
            batch_size: self.stream.batch_size,
            seed: self.seed.wrapping_add(0x5EED),
        }
    }

    /// Seen corruption specs in domain order, clean first.
    pub fn seen_specs(&self) -> Vec<CorruptionSpec> {
        let mut kinds = self.corruptions.seen.clone();
        kinds.sort();
        kinds
            .into_iter()
            .map(|kind| if kind == CorruptionKind::Clean { CorruptionSpec::clean() } else { CorruptionSpec { kind, severity: self.corruptions.severity } })
            .collect()
    }

    pub fn unseen_specs(&self) -> Vec<CorruptionSpec> {
        let mut kinds = self.corruptions.unseen.clone();
        kinds.sort();
        kinds.into_iter().map(|kind| CorruptionSpec { kind, severity: self.corruptions.severity }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(Error::config(format!("seed must be at most {}, got {}", i64::MAX, self.seed)));
        }
        let d = &self.dataset;
        nonzero("dataset.n_classes", d.n_classes)?;
        if d.n_classes < 2 {
            return Err(Error::config("dataset.n_classes must be at least 2"));
        }
        nonzero("dataset.train_per_class", d.train_per_class)?;
        nonzero("dataset.subnet_per_class", d.subnet_per_class)?;
        nonzero("dataset.encoder_per_class", d.encoder_per_class)?;
        nonzero("dataset.heldout_per_class", d.heldout_per_class)?;
        nonzero("dataset.test_per_class", d.test_per_class)?;
        for (name, t) in [("backbone", &self.backbone), ("subnet", &self.subnet)] {
            nonzero(&format!("{name}.batch_size"), t.batch_size)?;
            positive(&format!("{name}.lr"), t.lr)?;
        }
        let e = &self.encoder;
        nonzero("encoder.latent_dim", e.latent_dim)?;
        nonzero("encoder.batch_size", e.batch_size)?;
        positive("encoder.tau", e.tau)?;
        positive("encoder.lr", e.lr)?;
        if !(e.lambda_e >= 0.0 && e.lambda_e.is_finite()) {
            return Err(Error::config(format!("encoder.lambda_e must be non-negative, got {}", e.lambda_e)));
        }
        let s = &self.signature;
        if !(s.lambda_r > 0.0 && s.lambda_r < 1.0) {
            return Err(Error::config(format!("signature.lambda_r must lie in (0, 1), got {}", s.lambda_r)));
        }
        positive("signature.lr", s.lr)?;
        self.validate_corruptions()?;
        self.adaptation.validate().map_err(|e| prefix("adaptation", e))?;
        positive("stream.delta", self.stream.delta)?;
        nonzero("stream.batch_size", self.stream.batch_size)?;
        for (i, spec) in self.stream.sequence.iter().enumerate() {
            spec.validate().map_err(|e| prefix(&format!("stream.sequence[{i}]"), e))?;
        }
        Ok(())
    }

    fn validate_corruptions(&self) -> Result<()> {
        let c = &self.corruptions;
        CorruptionSpec::new(CorruptionKind::Clean, c.severity).map_err(|e| prefix("corruptions.severity", e))?;
        let seen: BTreeSet<_> = c.seen.iter().copied().collect();
        let unseen: BTreeSet<_> = c.unseen.iter().copied().collect();
        if seen.len() != c.seen.len() {
            return Err(Error::config("corruptions.seen lists a kind twice"));
        }
        if unseen.len() != c.unseen.len() {
            return Err(Error::config("corruptions.unseen lists a kind twice"));
        }
        if let Some(k) = seen.intersection(&unseen).next() {
            return Err(Error::config(format!("corruptions: {} is listed as both seen and unseen", k.name())));
        }
        if let Some(k) = c.seen.iter().find(|k| !k.is_seen()) {
            return Err(Error::config(format!("corruptions.seen: {} is a held-out kind", k.name())));
        }
        if let Some(k) = c.unseen.iter().find(|k| k.is_seen()) {
            return Err(Error::config(format!("corruptions.unseen: {} is a training kind", k.name())));
        }
        if !seen.contains(&CorruptionKind::Clean) {
            return Err(Error::config("corruptions.seen must include clean"));
        }
        if seen.len() < 2 {
            return Err(Error::config("corruptions.seen needs at least one corruption besides clean"));
        }
        Ok(())
    }
}

fn prefix(path: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{path}: {msg}")),
        other => other,
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.stream.delta, 0.1);
        assert_eq!(cfg.stream.batch_size, 64);
        assert_eq!(cfg.encoder.latent_dim, 32);
        assert_eq!(cfg.adaptation.momentum, 0.5);
        assert_eq!(cfg.adaptation.phi_thresh, 0.005);
        assert_eq!(cfg.encoder.lambda_e, 10.0);
        assert_eq!(cfg.signature.lambda_r, 0.2);
    }

    #[test]
    fn default_sequence_ends_clean() {
        let seq = ExperimentConfig::default().stream_sequence();
        assert_eq!(seq.len(), 4);
        assert!(seq[..3].iter().all(|s| !s.kind.is_seen() && s.severity == 5));
        assert_eq!(seq[3], CorruptionSpec::clean());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 9;
        cfg.method = Method::Entropy;
        cfg.stream.delta = 0.5;
        cfg.stream.sequence = vec![CorruptionSpec { kind: CorruptionKind::Saturate, severity: 3 }];
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[stream]\ndelta = 0.0",
            "[stream]\ndelta = -1.0",
            "[corruptions]\nseen = [\"clean\", \"speckle_noise\"]",
            "[corruptions]\nunseen = [\"contrast\"]",
            "[corruptions]\nseen = [\"gaussian_noise\"]",
            "[corruptions]\nseverity = 0",
            "[adaptation]\nmomentum = 0.0",
            "[signature]\nlambda_r = 1.0",
            "[encoder]\ntau = 0.0",
            "seeed = 1",
            "[stream]\nbatchsize = 3",
            "method = \"cotta\"",
            "[[stream.sequence]]\nkind = \"saturate\"\nseverity = 6",
        ] {
            match ExperimentConfig::from_toml(text) {
                Err(Error::InvalidConfig(_)) => {}
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn error_names_the_field() {
        let err = ExperimentConfig::from_toml("[adaptation]\nphi_thresh = -1.0").unwrap_err();
        assert!(err.to_string().contains("adaptation"), "{err}");
    }
}
