//! CIFAR-10 binary batches: one label byte followed by 3072 channel-major
//! pixel bytes per record.

use std::path::Path;

use crate::data::{CorruptionSpec, Dataset, PIXELS};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const CIFAR_CLASSES: usize = 10;

pub fn parse_cifar_binary<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::CorruptData(format!("{} bytes is not a whole number of {RECORD_BYTES}-byte records", bytes.len())));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for rec in bytes.chunks(RECORD_BYTES) {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::CorruptData(format!("label byte {} outside 0..9", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| T::c(b as f64 / 255.0)));
    }
    Dataset::new(Tensor::new([n, 3, 32, 32], data)?, labels, CIFAR_CLASSES, CorruptionSpec::clean())
}

pub fn load_cifar_binary<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes)
}

/// Inverse of [`parse_cifar_binary`]; pixels are rounded to the nearest byte.
pub fn to_cifar_binary<T: Scalar>(data: &Dataset<T>) -> Result<Vec<u8>> {
    if data.n_classes > CIFAR_CLASSES {
        return Err(Error::Unsupported(format!("{} classes do not fit the CIFAR-10 layout", data.n_classes)));
    }
    let mut out = Vec::with_capacity(data.len() * RECORD_BYTES);
    for (i, &label) in data.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(data.images.row(i).iter().map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<u8> {
        (0..n * RECORD_BYTES)
            .map(|i| if i % RECORD_BYTES == 0 { ((i / RECORD_BYTES) % 10) as u8 } else { (i * 7 % 256) as u8 })
            .collect()
    }

    #[test]
    fn record_count_and_round_trip() {
        let bytes = records(3);
        let d = parse_cifar_binary::<f32>(&bytes).unwrap();
        assert_eq!(d.len(), bytes.len() / RECORD_BYTES);
        assert_eq!(d.labels, vec![0, 1, 2]);
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(to_cifar_binary(&d).unwrap(), bytes);
    }

    #[test]
    fn bad_label_is_corrupt() {
        let mut bytes = records(2);
        bytes[RECORD_BYTES] = 255;
        assert!(matches!(parse_cifar_binary::<f64>(&bytes), Err(Error::CorruptData(_))));
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = records(2);
        assert!(matches!(parse_cifar_binary::<f64>(&bytes[..bytes.len() - 1]), Err(Error::CorruptData(_))));
        assert!(matches!(parse_cifar_binary::<f64>(&[]), Err(Error::CorruptData(_))));
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        std::fs::write(&path, records(4)).unwrap();
        assert_eq!(load_cifar_binary::<f64>(&path).unwrap().len(), 4);
        assert!(matches!(load_cifar_binary::<f64>(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
