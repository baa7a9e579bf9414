//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod bank;
pub mod exact;
pub mod grad;
