//! Small helpers shared by the training loops.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Mean cross-entropy of `[B, K]` logits against integer labels.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    let mut w = vec![T::zero(); b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::shape(format!("label {y} with {k} logits")));
        }
        w[i * k + y] = T::c(-1.0 / b as f64);
    }
    let lp = tape.log_softmax(logits, None)?;
    tape.weighted_sum(lp, &Tensor::new([b, k], w)?)
}

pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let k = m.row_len();
    m.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// A fresh permutation of `0..n` cut into batches of at most `size`.
pub fn shuffled_batches(n: usize, size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn normalized<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let n = dot(v, v).sqrt();
    (n > T::c(1e-12)).then(|| v.iter().map(|&x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([2, 4]));
        let l = cross_entropy(&mut tape, z, &[1, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let m = Tensor::<f64>::from_f64([2, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&m), vec![0, 1]);
    }
}
