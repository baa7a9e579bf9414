//! Checks whose answers are exact or closed-form: row-stochastic π and α,
//! divergence at equality, the momentum blend, the pair downsampler and the
//! adaptation loss at aligned and orthogonal signatures.

use latent_tta::extractor::{pair_downsample, G1, G2};
use latent_tta::nn::layers::blend;
use latent_tta::nn::{Tape, Tensor};
use latent_tta::runtime::loss_lu;
use latent_tta::signature::{alpha_matrix, kl_rows, loss_lr, pi_values};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub type Pair = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn unit_rows(rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, dim), rows).prop_filter_map("zero row", |m| {
        m.into_iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 1e-3).then(|| r.iter().map(|v| v / n).collect())
            })
            .collect()
    })
}

pub fn signatures_and_centroids() -> impl Strategy<Value = Pair> {
    (2usize..10, 2usize..8).prop_flat_map(|(d, o)| (unit_rows(d, o), unit_rows(d, o)))
}

pub fn accuracies() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..10).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(0.0..0.999f64, d), d))
}

pub fn blend_case() -> impl Strategy<Value = (Vec<f64>, f64, f64)> {
    (prop::collection::vec(0.0..10.0f64, 1..16), 0.0..10.0f64, 0.001..=1.0f64)
}

pub fn tile() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 3 * 2 * 4)
}

fn flat(m: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new([m.len(), m[0].len()], m.concat()).unwrap()
}

fn row_sums_are_one(m: &[Vec<f64>]) -> bool {
    m.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12 && r.iter().all(|&v| v >= 0.0))
}

pub fn pi_rows((s, c): &Pair) -> Result<(), TestCaseError> {
    if let Ok(pi) = pi_values(s, c) {
        prop_assert!(row_sums_are_one(&pi), "{pi:?}");
    }
    Ok(())
}

pub fn alpha_rows(a: &[Vec<f64>]) -> Result<(), TestCaseError> {
    prop_assume!(a.iter().all(|r| r.iter().any(|&v| v > 0.0)));
    let alpha = alpha_matrix(a).unwrap();
    prop_assert!(row_sums_are_one(&alpha), "{alpha:?}");
    Ok(())
}

pub fn divergence((s, c): &Pair, seed: u64) -> Result<(), TestCaseError> {
    let pi = match pi_values(s, c) {
        Ok(p) => p,
        Err(_) => return Ok(()),
    };
    prop_assert_eq!(kl_rows(&pi, &pi).unwrap(), 0.0);

    let d = pi.len();
    let acc: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| ((i * 7 + j * 13) as u64 + seed) as f64 % 97.0 / 100.0 + 0.001).collect()).collect();
    let alpha = alpha_matrix(&acc).unwrap();
    let kl = kl_rows(&pi, &alpha).unwrap();
    prop_assert!(kl >= 0.0, "{kl}");

    // The differentiable form agrees with the plain one and vanishes at
    // α = π, which needs π to have full support.
    prop_assume!(pi.iter().flatten().all(|&v| v > 1e-12));
    let mut tape = Tape::<f64>::new();
    let sv = tape.constant(flat(s));
    let lr = loss_lr(&mut tape, sv, &flat(c), &alpha).unwrap();
    prop_assert!((tape.value(lr).item() - kl).abs() <= 1e-12 * kl.max(1.0));
    let self_lr = loss_lr(&mut tape, sv, &flat(c), &pi).unwrap();
    prop_assert!(tape.value(self_lr).item().abs() <= 1e-12);
    Ok(())
}

pub fn convex_blend((old, new_scale, m): &(Vec<f64>, f64, f64)) -> Result<(), TestCaseError> {
    let new: Vec<f64> = old.iter().map(|v| v * new_scale).collect();
    let mut out = old.clone();
    blend(&mut out, &new, *m);
    for ((&o, &n), &r) in old.iter().zip(&new).zip(&out) {
        prop_assert_eq!(r, (1.0 - m) * o + m * n);
        prop_assert!(r >= 0.0);
        prop_assert!(r >= o.min(n) - 1e-12 && r <= o.max(n) + 1e-12);
    }
    Ok(())
}

pub fn downsampler(tile: &[f64]) -> Result<(), TestCaseError> {
    let x = Tensor::new([2, 3, 2, 2], tile.to_vec()).unwrap();
    let (a, b) = pair_downsample(&x).unwrap();
    for (k, t) in tile.chunks(4).enumerate() {
        prop_assert_eq!(a.data()[k], 0.5 * t[1] + 0.5 * t[2]);
        prop_assert_eq!(b.data()[k], 0.5 * t[0] + 0.5 * t[3]);
    }
    Ok(())
}

pub fn momentum_examples() -> Result<(), String> {
    let mut mu = vec![0.0f64];
    blend(&mut mu, &[2.0], 0.5);
    if mu != [1.0] {
        return Err(format!("m=0.5 gave {mu:?}"));
    }
    blend(&mut mu, &[5.0], 1.0);
    if mu != [5.0] {
        return Err(format!("m=1 gave {mu:?}"));
    }
    Ok(())
}

pub fn downsampler_constants() -> Result<(), String> {
    if G1 != [[0.0, 0.5], [0.5, 0.0]] || G2 != [[0.5, 0.0], [0.0, 0.5]] {
        return Err("kernel constants".into());
    }
    let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 5.0]).unwrap();
    let (a, b) = pair_downsample(&x).unwrap();
    match (a.data()[0], b.data()[0]) {
        (2.5, 3.0) => Ok(()),
        got => Err(format!("[1,2,3,5] gave {got:?}")),
    }
}

pub fn adaptation_loss_closed_forms() -> Result<(), String> {
    for o in [2usize, 8, 32] {
        let mut e = vec![0.0f64; o];
        e[0] = 1.0;
        let mut f = vec![0.0f64; o];
        f[o - 1] = 1.0;
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([1, o], e.clone()).unwrap());
        let same = loss_lu(&mut tape, s, &e).map_err(|e| e.to_string())?;
        let orth = loss_lu(&mut tape, s, &f).map_err(|e| e.to_string())?;
        let (same, orth) = (tape.value(same).item(), tape.value(orth).item());
        if same != (-1f64).exp() || orth != 1.0 {
            return Err(format!("o={o}: aligned {same}, orthogonal {orth}"));
        }
    }
    Ok(())
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(Config { cases, failure_persistence: None, ..Config::default() }, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// Runs every check, the randomized ones for `cases` draws each, and
/// returns how many passed or the first failure.
pub fn run_suite(cases: u32) -> Result<usize, String> {
    let tag = |name: &'static str| move |e: String| format!("{name}: {e}");
    runner(cases).run(&signatures_and_centroids(), |p| pi_rows(&p)).map_err(|e| e.to_string()).map_err(tag("pi"))?;
    runner(cases).run(&accuracies(), |a| alpha_rows(&a)).map_err(|e| e.to_string()).map_err(tag("alpha"))?;
    runner(cases).run(&(signatures_and_centroids(), 0u64..1000), |(p, s)| divergence(&p, s)).map_err(|e| e.to_string()).map_err(tag("divergence"))?;
    runner(cases).run(&blend_case(), |b| convex_blend(&b)).map_err(|e| e.to_string()).map_err(tag("blend"))?;
    runner(cases).run(&tile(), |t| downsampler(&t)).map_err(|e| e.to_string()).map_err(tag("downsampler"))?;
    momentum_examples().map_err(tag("momentum"))?;
    downsampler_constants().map_err(tag("downsampler constants"))?;
    adaptation_loss_closed_forms().map_err(tag("adaptation loss"))?;
    Ok(8)
}
