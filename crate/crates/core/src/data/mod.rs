//! Datasets, corruption synthesis and the non-IID stream builder.

pub mod cifar;
pub mod corruption;
pub mod glyphs;
pub mod stream;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub use corruption::{apply_corruption, CorruptionKind, CorruptionSpec};
pub use stream::{build_stream, dirichlet_schedule, GroundTruth, StreamBatch, StreamConfig};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;

/// Identifier of a corruption domain. Seen domains occupy `0..9`, unseen
/// domains `9..12`; see [`CorruptionKind::domain`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub usize);

impl DomainId {
    pub const CLEAN: DomainId = DomainId(0);

    pub fn kind(self) -> Option<CorruptionKind> {
        CorruptionKind::ALL.get(self.0).copied()
    }

    pub fn is_seen(self) -> bool {
        self.kind().is_some_and(|k| k.is_seen())
    }
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind() {
            Some(k) => write!(f, "{}", k.name()),
            None => write!(f, "domain{}", self.0),
        }
    }
}

/// Labeled images `[B, 3, 32, 32]` in `[0, 1]`, tagged with the corruption
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub corruption: CorruptionSpec,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, n_classes: usize, corruption: CorruptionSpec) -> Result<Self> {
        if images.rank() != 4 || images.shape()[1..] != [CHANNELS, SIDE, SIDE] {
            return Err(Error::shape(format!("images must be [B, 3, 32, 32], got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::shape(format!("{} images, {} labels", images.batch(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::CorruptData(format!("label {bad} with {n_classes} classes")));
        }
        Ok(Dataset { images, labels, n_classes, corruption })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn domain(&self) -> DomainId {
        self.corruption.kind.domain()
    }

    /// Training routines call this before touching a dataset.
    pub fn ensure_seen(&self) -> Result<()> {
        if self.corruption.kind.is_seen() {
            Ok(())
        } else {
            Err(Error::GuardViolation(format!("{} is an unseen corruption and may not be trained on", self.corruption.kind.name())))
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Dataset {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            corruption: self.corruption,
        })
    }

    /// Applies a corruption to a copy of this (clean) dataset.
    pub fn corrupted(&self, spec: CorruptionSpec, seed: u64) -> Result<Self> {
        Ok(Dataset {
            images: apply_corruption(&self.images, spec, seed)?,
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            corruption: spec,
        })
    }
}
