use latent_tta::backbone::{fine_tune_subnetwork, train_classifier, Backbone, TrainConfig};
use latent_tta::data::glyphs::generate_glyphs;
use latent_tta::data::{apply_corruption, build_stream, CorruptionKind, CorruptionSpec, StreamConfig};
use latent_tta::encoder::{compute_centroids, train_joint, CorruptionEncoder, EncoderTrainConfig};
use latent_tta::extractor::{loss_ln, ExtractorNet};
use latent_tta::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Upper 0.1% point of χ² with 7 degrees of freedom.
const CHI2_7_999: f64 = 24.322;

fn chi2_uniform(hist: &[usize]) -> f64 {
    let n: usize = hist.iter().sum();
    let e = n as f64 / hist.len() as f64;
    hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum()
}

fn batch_chi2(delta: f64) -> Vec<f64> {
    let base = generate_glyphs::<f32>(11, 100, 8).unwrap();
    let cfg = StreamConfig { delta, sequence: vec![CorruptionSpec::clean()], batch_size: 64, seed: 12 };
    build_stream(&cfg, &base)
        .unwrap()
        .iter()
        .filter(|b| b.truth.labels.len() == 64)
        .map(|b| {
            let mut hist = [0usize; 8];
            b.truth.labels.iter().for_each(|&l| hist[l] += 1);
            chi2_uniform(&hist)
        })
        .collect()
}

#[test]
fn large_concentration_gives_uniform_batches() {
    let stats = batch_chi2(1e6);
    assert_eq!(stats.len(), 12);
    for s in stats {
        assert!(s < CHI2_7_999, "χ² = {s}");
    }
}

#[test]
fn small_concentration_gives_skewed_batches() {
    let stats = batch_chi2(0.01);
    let rejected = stats.iter().filter(|&&s| s > CHI2_7_999).count();
    assert!(rejected * 2 > stats.len(), "{stats:?}");
}

#[test]
fn training_routines_refuse_unseen_corruptions() {
    let clean = generate_glyphs::<f32>(1, 2, 4).unwrap();
    for &kind in CorruptionKind::unseen() {
        let bad = clean.corrupted(CorruptionSpec::new(kind, 5).unwrap(), 3).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let mut net = Backbone::<f32>::new(4, 0);
        assert!(matches!(train_classifier(&mut net, &bad, &cfg), Err(Error::GuardViolation(_))));
        assert!(matches!(fine_tune_subnetwork(&net, &bad, &cfg), Err(Error::GuardViolation(_))));

        let mut enc = CorruptionEncoder::<f32>::new(8, 0);
        let ecfg = EncoderTrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let domains = [clean.clone(), bad.clone()];
        assert!(matches!(train_joint(&mut enc, &domains, &ecfg), Err(Error::GuardViolation(_))));
        assert!(matches!(compute_centroids(&enc, &domains), Err(Error::GuardViolation(_))));

        let ext = ExtractorNet::<f32>::new(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(loss_ln(&ext, &bad), Err(Error::GuardViolation(_))));
    }
}

fn any_spec() -> impl Strategy<Value = CorruptionSpec> {
    (0..CorruptionKind::ALL.len(), 1u8..=5).prop_map(|(k, s)| CorruptionSpec::new(CorruptionKind::ALL[k], s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn corruption_is_clipped_and_deterministic(spec in any_spec(), seed in any::<u64>(), data_seed in 0u64..1000) {
        let images = generate_glyphs::<f32>(data_seed, 1, 2).unwrap().images;
        let a = apply_corruption(&images, spec, seed).unwrap();
        let b = apply_corruption(&images, spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.shape(), images.shape());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn out_of_range_severity_is_rejected(k in 0..CorruptionKind::ALL.len(), s in prop_oneof![Just(0u8), 6u8..=255]) {
        prop_assert!(matches!(CorruptionSpec::new(CorruptionKind::ALL[k], s), Err(Error::InvalidConfig(_))));
    }
}
