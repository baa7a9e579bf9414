//! Dense tensors, reverse-mode differentiation, layers and Adam.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod macs;
pub mod param;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use layers::{BatchNorm, Conv2d, Dense};
pub use macs::{mac_count, LayerSpec};
pub use param::{Module, Parameter};
pub use tape::{BatchStats, BnMode, Bound, Gradients, Tape, Var};
pub use tensor::Tensor;
