//! Label-balanced store of corruption-representative samples.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::train::{dot, normalized};

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry<T> {
    /// One image, flattened.
    pub x: Vec<T>,
    /// Unit corruption projection.
    pub c: Vec<T>,
    /// Predicted class.
    pub y_hat: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InsertOutcome<T> {
    Added,
    Replaced(BankEntry<T>),
    Discarded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    n_classes: usize,
    image_shape: Vec<usize>,
    /// Insertion order; a replacement appends the newcomer.
    entries: Vec<BankEntry<T>>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, n_classes: usize, image_shape: &[usize]) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::config("memory bank needs at least one class"));
        }
        if capacity == 0 {
            return Err(Error::config("memory bank capacity must be positive"));
        }
        Ok(MemoryBank { capacity, n_classes, image_shape: image_shape.to_vec(), entries: Vec::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `⌈𝒩 / |Y|⌉`.
    pub fn class_cap(&self) -> usize {
        self.capacity.div_ceil(self.n_classes)
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry<T>] {
        &self.entries
    }

    pub fn class_count(&self, y: usize) -> usize {
        self.entries.iter().filter(|e| e.y_hat == y).count()
    }

    /// Adds while there is room in both the bank and the class bucket;
    /// otherwise competes with the bucket member least similar to `c_curr`.
    pub fn insert(&mut self, x: Vec<T>, c: Vec<T>, y_hat: usize, c_curr: &[T]) -> Result<InsertOutcome<T>> {
        if y_hat >= self.n_classes {
            return Err(Error::config(format!("class {y_hat} with {} classes", self.n_classes)));
        }
        if x.len() != self.image_shape.iter().product::<usize>() {
            return Err(Error::shape(format!("image of {} values for shape {:?}", x.len(), self.image_shape)));
        }
        let entry = BankEntry { x, c, y_hat };
        if self.class_count(y_hat) < self.class_cap() && self.entries.len() < self.capacity {
            self.entries.push(entry);
            return Ok(InsertOutcome::Added);
        }
        let incoming = dot(&entry.c, c_curr);
        let weakest = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.y_hat == y_hat)
            .map(|(i, e)| (i, dot(&e.c, c_curr)))
            .fold(None, |best: Option<(usize, T)>, (i, s)| match best {
                Some((_, b)) if b <= s => best,
                _ => Some((i, s)),
            });
        match weakest {
            Some((i, s)) if s <= incoming => {
                let old = self.entries.remove(i);
                self.entries.push(entry);
                Ok(InsertOutcome::Replaced(old))
            }
            _ => Ok(InsertOutcome::Discarded),
        }
    }

    /// Normalized mean of the stored projections.
    pub fn mean_embedding(&self) -> Result<Vec<T>> {
        let first = self.entries.first().ok_or(Error::EmptyBank)?;
        let mut mean = vec![T::zero(); first.c.len()];
        for e in &self.entries {
            mean.iter_mut().zip(&e.c).for_each(|(m, &v)| *m += v);
        }
        let n = T::c(self.entries.len() as f64);
        mean.iter_mut().for_each(|m| *m /= n);
        normalized(&mean).ok_or(Error::DegenerateCentroid(usize::MAX))
    }

    /// Population variance of the entries' similarity to `c_curr`.
    pub fn similarity_variance(&self, c_curr: &[T]) -> Result<T> {
        let n = self.entries.len();
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, have: n });
        }
        let sims: Vec<T> = self.entries.iter().map(|e| dot(&e.c, c_curr)).collect();
        let nf = T::c(n as f64);
        let mean = sims.iter().copied().sum::<T>() / nf;
        Ok(sims.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / nf)
    }

    /// Every stored image as one batch, in insertion order.
    pub fn snapshot_batch(&self) -> Result<Tensor<T>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut shape = vec![self.entries.len()];
        shape.extend(&self.image_shape);
        Tensor::new(shape, self.entries.iter().flat_map(|e| e.x.iter().copied()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    #[test]
    fn caps_and_first_insert() {
        let mut b = MemoryBank::<f64>::new(8, 4, &[1]).unwrap();
        assert_eq!(b.class_cap(), 2);
        assert_eq!(b.insert(vec![0.0], unit(0.0), 1, &unit(0.0)).unwrap(), InsertOutcome::Added);
        assert!(MemoryBank::<f64>::new(8, 0, &[1]).is_err());
    }

    #[test]
    fn replace_or_discard() {
        let mut b = MemoryBank::<f64>::new(2, 1, &[1]).unwrap();
        let curr = vec![1.0, 0.0];
        let with_sim = |s: f64| vec![s, (1.0 - s * s).sqrt()];
        b.insert(vec![1.0], with_sim(0.2), 0, &curr).unwrap();
        b.insert(vec![2.0], with_sim(0.5), 0, &curr).unwrap();
        assert_eq!(b.insert(vec![3.0], with_sim(0.1), 0, &curr).unwrap(), InsertOutcome::Discarded);
        match b.insert(vec![4.0], with_sim(0.9), 0, &curr).unwrap() {
            InsertOutcome::Replaced(old) => assert_eq!(old.x, vec![1.0]),
            o => panic!("{o:?}"),
        }
        assert_eq!(b.snapshot_batch().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_and_variance() {
        let mut b = MemoryBank::<f64>::new(4, 2, &[1]).unwrap();
        assert!(matches!(b.mean_embedding(), Err(Error::EmptyBank)));
        b.insert(vec![0.0], vec![1.0, 0.0], 0, &[1.0, 0.0]).unwrap();
        assert!(matches!(b.similarity_variance(&[1.0, 0.0]), Err(Error::InsufficientSamples { .. })));
        b.insert(vec![0.0], vec![0.0, 1.0], 1, &[1.0, 0.0]).unwrap();
        let m = b.mean_embedding().unwrap();
        assert!((m[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((b.similarity_variance(&[1.0, 0.0]).unwrap() - 0.25).abs() < 1e-15);
    }
}
