use latent_tta::data::{CorruptionKind, CorruptionSpec, DomainId};
use latent_tta::harness::{read_metrics_csv, write_metrics_csv, Checkpoint, ExperimentConfig, MetricRecord, TensorData};
use latent_tta::nn::Tensor;
use latent_tta::runtime::Method;
use latent_tta::Error;
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

fn chunk() -> impl Strategy<Value = TensorData> {
    prop_oneof![
        shape().prop_flat_map(|s| {
            let n: usize = s.iter().product();
            prop::collection::vec(any::<u32>(), n).prop_map(move |bits| {
                TensorData::F32(Tensor::new(s.clone(), bits.into_iter().map(f32::from_bits).collect()).unwrap())
            })
        }),
        shape().prop_flat_map(|s| {
            let n: usize = s.iter().product();
            prop::collection::vec(any::<u64>(), n).prop_map(move |bits| {
                TensorData::F64(Tensor::new(s.clone(), bits.into_iter().map(f64::from_bits).collect()).unwrap())
            })
        }),
    ]
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    prop::collection::vec(chunk(), 0..6).prop_map(|chunks| {
        let mut ck = Checkpoint::new();
        for (i, c) in chunks.into_iter().enumerate() {
            ck.insert_data(format!("t{i}/w"), c).unwrap();
        }
        ck
    })
}

fn spec() -> impl Strategy<Value = CorruptionSpec> {
    (0..CorruptionKind::ALL.len(), 1u8..=5).prop_map(|(k, s)| CorruptionSpec::new(CorruptionKind::ALL[k], s).unwrap())
}

fn config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (0..=i64::MAX as u64, 0usize..4, 2usize..16, 1usize..300, 1usize..100),
        (1usize..40, 1e-5..1e-1f64, 0.01..2.0f64, 0.0..100.0f64, 0.0..0.99f64),
        (0.01..=1.0f64, 1e-4..0.5f64, 0.0..0.5f64, 1usize..5, 1usize..200),
        (1e-3..1e6f64, 1usize..128, prop::collection::vec(spec(), 0..5)),
    )
        .prop_map(|((seed, m, classes, train, test), (epochs, lr, tau, lambda_e, lambda_r), (mom, phi, margin, patience, cap), (delta, n, seq))| {
            let mut c = ExperimentConfig { seed, method: Method::ALL[m], ..Default::default() };
            c.dataset.n_classes = classes;
            c.dataset.train_per_class = train;
            c.dataset.test_per_class = test;
            c.backbone.epochs = epochs;
            c.subnet.lr = lr;
            c.encoder.tau = tau;
            c.encoder.lambda_e = lambda_e;
            c.signature.lambda_r = lambda_r;
            c.adaptation.momentum = mom;
            c.adaptation.phi_thresh = phi;
            c.adaptation.margin = margin;
            c.adaptation.patience = patience;
            c.adaptation.memory_capacity = cap;
            c.stream.delta = delta;
            c.stream.batch_size = n;
            c.stream.sequence = seq;
            c
        })
}

fn record() -> impl Strategy<Value = MetricRecord> {
    (
        (0usize..10_000, 0..CorruptionKind::ALL.len(), prop::option::of(0..CorruptionKind::ALL.len())),
        (any::<bool>(), any::<bool>(), any::<bool>(), 0u32..=64, 1u32..=64),
        (any::<u64>(), any::<u64>(), any::<u64>()),
    )
        .prop_map(|((batch_idx, t, a), (shift_event, bn_update, adapt_step, hit, of), (forward_macs, backward_samples, mem_proxy_bytes))| MetricRecord {
            batch_idx,
            true_domain: DomainId(t),
            assigned_domain: a.map(DomainId),
            shift_event,
            bn_update,
            adapt_step,
            batch_accuracy: (hit.min(of) as f64 / of as f64 * 1e6).round() / 1e6,
            forward_macs,
            backward_samples,
            mem_proxy_bytes,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn checkpoint_round_trip_is_bitwise(ck in checkpoint()) {
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), ck.len());
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn damaged_checkpoints_are_rejected(ck in checkpoint(), pos in any::<prop::sample::Index>(), flip in 1u8..=255, cut in any::<prop::sample::Index>()) {
        let bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[pos.index(bytes.len())] ^= flip;
        prop_assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptData(_) | Error::Unsupported(_))));
        let short = &bytes[..cut.index(bytes.len())];
        prop_assert!(matches!(Checkpoint::from_bytes(short), Err(Error::CorruptData(_))));
        let mut long = bytes.clone();
        long.push(0);
        prop_assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::CorruptData(_))));
    }

    #[test]
    fn valid_configs_survive_toml(cfg in config()) {
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn metrics_csv_round_trip(records in prop::collection::vec(record(), 0..40)) {
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &records).unwrap();
        let text = String::from_utf8(out).unwrap();
        prop_assert_eq!(text.lines().count(), records.len() + 1);
        prop_assert_eq!(read_metrics_csv(&text).unwrap(), records);
    }
}

#[test]
fn oversized_seed_is_rejected() {
    let cfg = ExperimentConfig { seed: u64::MAX, ..Default::default() };
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dkpt");
    let mut ck = Checkpoint::new();
    ck.put("w", &Tensor::<f32>::from_f64([2, 2], &[1.0, -2.0, 0.5, 3.25]).unwrap()).unwrap();
    ck.put_f64("meta", &[7.0]).unwrap();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.get::<f32>("w").unwrap(), ck.get::<f32>("w").unwrap());
    assert_eq!(back.get_f64("meta").unwrap(), vec![7.0]);
    assert!(matches!(back.get::<f32>("missing"), Err(Error::CorruptData(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::Io { .. })));
}
