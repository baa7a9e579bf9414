//! Memory-bank invariants over random insert sequences.

use latent_tta::memory::{InsertOutcome, MemoryBank};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub const DIM: usize = 3;

pub fn unit(v: [f64; DIM]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-9 {
        return vec![1.0, 0.0, 0.0];
    }
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn vec3() -> impl Strategy<Value = [f64; DIM]> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
}

#[derive(Debug, Clone)]
pub struct Case {
    capacity: usize,
    n_classes: usize,
    c_curr: [f64; DIM],
    inserts: Vec<(usize, [f64; DIM])>,
}

pub fn case() -> impl Strategy<Value = Case> {
    (1usize..=80, 1usize..=12, vec3()).prop_flat_map(|(capacity, n_classes, c_curr)| {
        prop::collection::vec((0..n_classes, vec3()), 0..200).prop_map(move |inserts| Case { capacity, n_classes, c_curr, inserts })
    })
}

fn bucket_min(bank: &MemoryBank<f64>, y: usize, c_curr: &[f64]) -> Option<f64> {
    bank.entries().iter().filter(|e| e.y_hat == y).map(|e| dot(&e.c, c_curr)).reduce(f64::min)
}

/// Replays one sequence, checking capacity, the per-class cap, the
/// occupancy sum, the insert outcome rules and replacement monotonicity
/// after every insert.
pub fn check_sequence(case: &Case) -> Result<(), TestCaseError> {
    let mut bank = MemoryBank::<f64>::new(case.capacity, case.n_classes, &[1]).unwrap();
    let cap = case.capacity.div_ceil(case.n_classes);
    prop_assert_eq!(bank.class_cap(), cap);
    let c_curr = unit(case.c_curr);
    for (i, (y, c)) in case.inserts.iter().enumerate() {
        let c = unit(*c);
        let before = bank.clone();
        let min_before = bucket_min(&bank, *y, &c_curr);
        let room = bank.class_count(*y) < cap && bank.occupancy() < case.capacity;
        let outcome = bank.insert(vec![i as f64], c.clone(), *y, &c_curr).unwrap();

        prop_assert!(bank.occupancy() <= case.capacity);
        for k in 0..case.n_classes {
            prop_assert!(bank.class_count(k) <= cap);
        }
        let total: usize = (0..case.n_classes).map(|k| bank.class_count(k)).sum();
        prop_assert_eq!(total, bank.occupancy());

        match outcome {
            InsertOutcome::Added => {
                prop_assert!(room);
                prop_assert_eq!(bank.occupancy(), before.occupancy() + 1);
            }
            InsertOutcome::Discarded => {
                prop_assert!(!room);
                prop_assert_eq!(&bank, &before);
                if let Some(m) = min_before {
                    prop_assert!(m > dot(&c, &c_curr));
                }
            }
            InsertOutcome::Replaced(old) => {
                prop_assert!(!room);
                prop_assert_eq!(old.y_hat, *y);
                prop_assert_eq!(bank.occupancy(), before.occupancy());
                let m = min_before.unwrap();
                prop_assert_eq!(dot(&old.c, &c_curr), m);
                prop_assert!(m <= dot(&c, &c_curr));
                prop_assert!(bucket_min(&bank, *y, &c_curr).unwrap() >= m);
            }
        }
    }
    Ok(())
}

/// Runs `cases` random sequences from a fixed seed.
pub fn run_suite(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(Config { cases, failure_persistence: None, ..Config::default() }, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&case(), |c| check_sequence(&c)).map_err(|e| e.to_string())
}
