//! Finite-difference checks for every differentiable op and every loss.
//! Each returns the worst relative error it saw.

use latent_tta::backbone::Backbone;
use latent_tta::encoder::{supcon_loss, CorruptionEncoder};
use latent_tta::extractor::{ExtractorNet, Residuals};
use latent_tta::nn::gradcheck::{check_fn, check_params, GradReport};
use latent_tta::nn::{Bound, BnMode, Module, Tape, Tensor, Var};
use latent_tta::runtime::adaptation_loss;
use latent_tta::signature::{alpha_matrix, loss_lcm, loss_lm, loss_lr, Probe, SignatureNet};
use latent_tta::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;
// Losses through the conv stacks: a step of 1e-5 can straddle a ReLU or
// max-pool kink, which wrecks the central difference for that coordinate.
pub const DEEP_H: f64 = 1e-6;

pub type Check = (&'static str, fn() -> GradReport, f64);

pub const OP_CHECKS: &[Check] = &[
    ("conv2d", conv2d, TOL),
    ("dense", dense, TOL),
    ("batch_norm", batch_norm, TOL),
    ("elementwise", elementwise, TOL),
    ("activations and pooling", activations, TOL),
    ("softmax family", softmax_family, TOL),
    ("normalization and reductions", reductions, TOL),
    ("shape ops", shape_ops, TOL),
    ("small network", small_network, TOL),
];

pub const LOSS_CHECKS: &[Check] = &[
    ("counterpart loss", counterpart_loss, TOL),
    ("contrastive loss", contrastive_loss, TOL),
    ("joint encoder loss", joint_encoder_loss, TOL),
    ("cross-modal loss", cross_modal_loss, TOL),
    ("accuracy regularizer", accuracy_regularizer, TOL),
    ("combined signature loss", combined_signature_loss, TOL),
    ("adaptation loss via fingerprint", adaptation_fingerprint_loss, COMPOSED_TOL),
];

fn worst(reports: impl IntoIterator<Item = GradReport>) -> GradReport {
    reports.into_iter().fold(GradReport { max_rel_err: 0.0, checked: 0 }, |a, b| GradReport {
        max_rel_err: a.max_rel_err.max(b.max_rel_err),
        checked: a.checked + b.checked,
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_in(rng, shape, -1.0, 1.0)
}

fn rand_in(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = rand_t(rng, &[rows, cols]);
    for r in t.data_mut().chunks_mut(cols) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Weighted sum with fixed irregular weights, so every output element
/// contributes a distinct amount to the checked scalar.
fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())?;
    tape.weighted_sum(y, &w)
}

pub fn conv2d() -> GradReport {
    let mut r = rng();
    worst([(1, 1), (2, 0), (1, 0), (2, 1)].map(|(stride, pad)| {
        let inputs = [rand_t(&mut r, &[2, 3, 5, 5]), rand_t(&mut r, &[4, 3, 3, 3])];
        check_fn(&inputs, H, |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            probe(t, y)
        })
        .unwrap()
    }))
}

pub fn dense() -> GradReport {
    let mut r = rng();
    let inputs = [rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 5]), rand_t(&mut r, &[5])];
    check_fn(&inputs, H, |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        probe(t, y)
    })
    .unwrap()
}

pub fn batch_norm() -> GradReport {
    let mut r = rng();
    let inputs = [rand_t(&mut r, &[3, 2, 2, 2]), rand_t(&mut r, &[2]), rand_t(&mut r, &[2])];
    worst([BnMode::Train, BnMode::Eval].map(|mode| {
        check_fn(&inputs, H, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], (&[0.1, -0.2], &[0.5, 2.0]), mode, 1e-5)?;
            probe(t, y)
        })
        .unwrap()
    }))
}

pub fn elementwise() -> GradReport {
    let mut r = rng();
    let inputs = [rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3]), Tensor::from_f64([1], &[1.7]).unwrap()];
    check_fn(&inputs, H, |t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[1])?;
        let m = t.mul(s, v[1])?;
        let d = t.div_scalar(m, v[2])?;
        let sc = t.scale(d, -0.7)?;
        let e = t.exp(sc)?;
        probe(t, e)
    })
    .unwrap()
}

pub fn activations() -> GradReport {
    let mut r = rng();
    let inputs = [rand_t(&mut r, &[2, 2, 4, 4])];
    check_fn(&inputs, H, |t, v| {
        let a = t.leaky_relu(v[0], 0.1)?;
        let b = t.relu(a)?;
        let c = t.add(a, b)?;
        let p = t.maxpool2d(c, 2, 2)?;
        let g = t.global_avg_pool(p)?;
        probe(t, g)
    })
    .unwrap()
}

pub fn softmax_family() -> GradReport {
    let mut r = rng();
    let inputs = [rand_t(&mut r, &[3, 4])];
    let mask: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
    check_fn(&inputs, H, |t, v| {
        let s = t.softmax(v[0])?;
        let l = t.log_softmax(v[0], None)?;
        let lm = t.log_softmax(v[0], Some(mask.clone()))?;
        let a = t.mul(s, l)?;
        let b = t.add(a, lm)?;
        probe(t, b)
    })
    .unwrap()
}

pub fn reductions() -> GradReport {
    let mut r = rng();
    let inputs = [rand_t(&mut r, &[3, 5]), rand_t(&mut r, &[5, 3])];
    check_fn(&inputs, H, |t, v| {
        let n = t.normalize_rows(v[0])?;
        let bt = t.transpose(v[1])?;
        let m = t.mul(n, bt)?;
        let rows = t.sum_last_axis(m)?;
        let e = t.exp(rows)?;
        let s = t.sum(e)?;
        let mn = t.mean(m)?;
        let both = t.reshape(mn, [1])?;
        t.add(s, both)
    })
    .unwrap()
}

pub fn shape_ops() -> GradReport {
    let mut r = rng();
    let inputs = [rand_t(&mut r, &[2, 1, 2, 2]), rand_t(&mut r, &[2, 2, 2, 2])];
    check_fn(&inputs, H, |t, v| {
        let c = t.concat_channels(&[v[0], v[1]])?;
        let f = t.flatten(c)?;
        let sq = t.mul(f, f)?;
        probe(t, sq)
    })
    .unwrap()
}

pub fn small_network() -> GradReport {
    let mut r = rng();
    let inputs = [
        rand_t(&mut r, &[4, 2, 5, 5]),
        rand_t(&mut r, &[3, 2, 3, 3]),
        rand_t(&mut r, &[3]),
        rand_t(&mut r, &[3]),
        rand_t(&mut r, &[3, 4]),
        rand_t(&mut r, &[4]),
    ];
    check_fn(&inputs, H, |t, v| {
        let c = t.conv2d(v[0], v[1], 1, 1)?;
        let (b, _) = t.batch_norm(c, v[2], v[3], (&[0.0; 3], &[1.0; 3]), BnMode::Train, 1e-5)?;
        let a = t.leaky_relu(b, 0.1)?;
        let p = t.global_avg_pool(a)?;
        let d = t.dense(p, v[4], v[5])?;
        let l = t.log_softmax(d, None)?;
        probe(t, l)
    })
    .unwrap()
}

/// Analytic parameter gradients of `loss`, then finite differences over at
/// most `per_param` coordinates of each trainable parameter.
fn check_model<M: Module<f64>>(model: &mut M, h: f64, per_param: usize, loss: impl Fn(&M, &mut Tape<f64>, &Bound) -> Result<Var>) -> GradReport {
    check_bound(model, h, per_param, |m, t| {
        let bound = t.bind(m.parameters());
        Ok((loss(m, t, &bound)?, bound))
    })
}

/// Same as `check_model` for losses that bind the parameters themselves.
fn check_bound<M: Module<f64>>(model: &mut M, h: f64, per_param: usize, loss: impl Fn(&M, &mut Tape<f64>) -> Result<(Var, Bound)>) -> GradReport {
    let mut tape = Tape::new();
    let (out, bound) = loss(model, &mut tape).unwrap();
    let grads = tape.backward(out).unwrap();
    model.zero_grad();
    grads.accumulate(model.parameters_mut(), &bound);
    check_params(
        model,
        |m| m.parameters_mut(),
        |m| {
            let mut tape = Tape::new();
            let (out, _) = loss(m, &mut tape)?;
            Ok(tape.value(out).item())
        },
        h,
        per_param,
    )
    .unwrap()
}

pub fn counterpart_loss() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = ExtractorNet::<f64>::new(&mut rng);
    let x = rand_in(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    check_model(&mut net, DEEP_H, 24, |m, t, b| Residuals::compute(m, t, b.vars(), &x)?.loss(t))
}

pub fn contrastive_loss() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels = [0, 1, 0, 2, 1, 2, 0, 1];
    let proj = unit_rows(&mut rng, labels.len(), 5);
    worst([0.1, 0.5, 1.0].map(|tau| check_fn(&[proj.clone()], H, |t, v| supcon_loss(t, v[0], &labels, tau)).unwrap()))
}

pub fn joint_encoder_loss() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut enc = CorruptionEncoder::<f64>::new(6, 4);
    let x = rand_in(&mut rng, &[4, 3, 32, 32], 0.0, 1.0);
    let labels = [0, 1, 0, 1];
    check_model(&mut enc, DEEP_H, 6, |m, t, b| {
        let out = m.forward(t, b.vars(), &x)?;
        let ld = supcon_loss(t, out.projection, &labels, 0.1)?;
        let ln = out.residuals.loss(t)?;
        let w = t.scale(ln, 10.0)?;
        t.add(ld, w)
    })
}

fn signature_fixture() -> (SignatureNet<f64>, Tensor<f64>, Tensor<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = SignatureNet::new(12, 4, 6);
    let f = rand_in(&mut rng, &[3, 12], -2.0, 2.0);
    let c = unit_rows(&mut rng, 3, 4);
    let acc = vec![vec![0.9, 0.3, 0.5], vec![0.2, 0.8, 0.4], vec![0.6, 0.1, 0.7]];
    (net, f, c, alpha_matrix(&acc).unwrap())
}

pub fn cross_modal_loss() -> GradReport {
    let (mut net, f, c, _) = signature_fixture();
    check_model(&mut net, H, 64, |m, t, b| {
        let fv = t.constant(f.clone());
        let s = m.forward(t, &mut b.cursor(), fv)?;
        loss_lcm(t, s, &c)
    })
}

pub fn accuracy_regularizer() -> GradReport {
    let (mut net, f, c, alpha) = signature_fixture();
    check_model(&mut net, H, 64, |m, t, b| {
        let fv = t.constant(f.clone());
        let s = m.forward(t, &mut b.cursor(), fv)?;
        loss_lr(t, s, &c, &alpha)
    })
}

pub fn combined_signature_loss() -> GradReport {
    let (mut net, f, c, alpha) = signature_fixture();
    check_model(&mut net, H, 64, |m, t, b| Ok(loss_lm(t, m, b.vars(), &f, &c, &alpha, 0.2)?.0))
}

/// Gradients reach the sub-network through probe → live net → frozen `𝒮`.
pub fn adaptation_fingerprint_loss() -> GradReport {
    let mut live = Backbone::<f64>::new(4, 7);
    live.freeze_trunk();
    // Spread the running statistics away from the (0, 1) defaults.
    for (l, bn) in live.state.bns.iter_mut().enumerate() {
        for (k, (m, v)) in bn.running_mean.iter_mut().zip(bn.running_var.iter_mut()).enumerate() {
            *m = 0.05 * ((k + l) % 5) as f64 - 0.1;
            *v = 0.5 + 0.1 * ((3 * k + l) % 7) as f64;
        }
    }
    let signet = SignatureNet::<f64>::new(16 * 4, 8, 8);
    let probe = Probe::<f64>::new(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c_bar = unit_rows(&mut rng, 1, 8).into_data();
    check_bound(&mut live, DEEP_H, 12, |m, t| adaptation_loss(t, m, &signet, &probe, &c_bar))
}
