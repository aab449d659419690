mod common;

use common::{jitter, random_krnet, FullGaussian, LinearOracle};
use nalgebra::DMatrix;
use proptest::prelude::*;
use vaekrnet::krnet::KRnetConfig;
use vaekrnet::numerics::{gauss_sample, grad_check, seeded_rng, Graph, Parameterized, Tensor};
use vaekrnet::vae::GaussHead;
use vaekrnet::vae_krnet::{mean_and_se, LatentFlowSpec, VaeKrnetConfig, VaeKrnetModel};
use vaekrnet::vb::{
    krnet_vb_loss_values, train_flow, train_two_stage, train_vae_krnet, vae_krnet_vb_terms, vae_noise_dim, GaussianTarget,
    Lambda, MeanFieldModel, ScaledTarget, TargetDensity, TrainConfig, VariationalFlow,
};

fn quick(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig { iterations, batch: 64, val_size: 2000, val_every: 100, seed, ..TrainConfig::default() }
}

#[test]
fn mean_field_recovers_a_gaussian() {
    let target = GaussianTarget::new(vec![3.0], vec![2.0]).unwrap();
    let cfg = TrainConfig { lr: 1e-2, lr_final: Some(1e-4), val_size: 100_000, val_every: 1000, ..quick(20_000, 1) };
    let fit = train_flow(MeanFieldModel::new(1), &target, &cfg).unwrap();
    let (m, s) = (fit.best.mean()[0], fit.best.std()[0]);
    assert!((m - 3.0).abs() < 0.03, "mean {m}");
    assert!((s - 2.0).abs() < 0.02, "std {s}, mean {m}");
}

/// `y = a x + sigma e` with one latent dimension: the diagonal encoder is exact.
fn exact_pair(c: f64) -> (VaeKrnetModel, FullGaussian, LinearOracle) {
    let o = LinearOracle::new(DMatrix::from_row_slice(2, 1, &[0.8, -0.5]), 0.4);
    let target = FullGaussian::new(&o.marginal_cov(), c);
    (o.model(o.posterior_encoder()), target, o)
}

#[test]
fn exact_model_has_constant_infinite_lambda_loss() {
    let (m, target, _) = exact_pair(5.0);
    let noise = gauss_sample(&mut seeded_rng(2), 500, vae_noise_dim(&m));
    let g = Graph::no_grad();
    let loss = vae_krnet_vb_terms(&m, &target, &g, &noise).unwrap().loss(Lambda::Infinite);
    for v in loss.data() {
        assert!((v + 5f64.ln()).abs() < 1e-10, "{v}");
    }
}

#[test]
fn finite_lambda_subtracts_the_mutual_information() {
    let (m, target, o) = exact_pair(5.0);
    let noise = gauss_sample(&mut seeded_rng(3), 200_000, vae_noise_dim(&m));
    let g = Graph::no_grad();
    let terms = vae_krnet_vb_terms(&m, &target, &g, &noise).unwrap();
    let (mean, se) = mean_and_se(terms.loss(Lambda::Finite(2.0)).data());
    let ata = o.a.transpose() * &o.a / (o.sigma * o.sigma);
    let mi = 0.5 * (DMatrix::identity(1, 1) + ata).determinant().ln();
    let want = -5f64.ln() - mi;
    assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lambda_enters_linearly(seed in 0u64..1000, lambda in 1.01f64..50.0) {
        let mut rng = seeded_rng(seed);
        let cfg = VaeKrnetConfig::canonical(3, 2, 1, 6).with_prior_flow(LatentFlowSpec::new(1, 6));
        let mut m = VaeKrnetModel::new(&cfg, &mut rng).unwrap();
        jitter(&mut m, &mut rng, 0.1);
        let target = GaussianTarget::standard(3);
        let noise = gauss_sample(&mut rng, 16, vae_noise_dim(&m));
        let g = Graph::no_grad();
        let t = vae_krnet_vb_terms(&m, &target, &g, &noise).unwrap();
        let fin = t.loss(Lambda::Finite(lambda));
        let inf = t.loss(Lambda::Infinite);
        for i in 0..16 {
            let lhs = fin.data()[i] - (lambda - 1.0) * inf.data()[i];
            let rhs = t.prior.data()[i] - t.cond.data()[i];
            prop_assert!((lhs - rhs).abs() < 1e-8 * (1.0 + lambda * inf.data()[i].abs()));
        }
    }
}

#[test]
fn scaling_the_target_shifts_the_loss_only() {
    let model = random_krnet(KRnetConfig::with_schedule(3, vec![3, 2], 2, 8).unwrap(), 4, 0.2);
    let base = GaussianTarget::new(vec![0.5, -1.0, 0.0], vec![1.5, 0.7, 1.0]).unwrap();
    let scaled = ScaledTarget::new(base.clone(), 7.5).unwrap();
    let z = gauss_sample(&mut seeded_rng(5), 32, 3);
    let run = |t: &dyn TargetDensity| {
        let g = Graph::new();
        let v = krnet_vb_loss_values(&model, t, &g, &z).unwrap();
        let grads = g.backward(&v.mean()).unwrap();
        (v.data().to_vec(), grads.flat_for(&model))
    };
    let (v0, g0) = run(&base);
    let (v1, g1) = run(&scaled);
    for (a, b) in v0.iter().zip(&v1) {
        assert!((a - 7.5f64.ln() - b).abs() < 1e-12);
    }
    for (a, b) in g0.iter().zip(&g1) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(ScaledTarget::new(base, 0.0).is_err());
}

#[test]
fn mean_field_is_a_scale_bias_layer() {
    let mf = MeanFieldModel::from_moments(vec![1.0, -2.0, 0.5], vec![0.3, 2.0, 1.1]).unwrap();
    let sb = mf.to_scale_bias();
    let z = gauss_sample(&mut seeded_rng(6), 50, 3);
    let g = Graph::no_grad();
    let (y, log_q) = mf.transport(&g, &g.constant(z.clone())).unwrap();
    let (z_back, ld) = sb.forward(&g, &y).unwrap();
    let normal = -1.5 * (2.0 * std::f64::consts::PI).ln();
    for i in 0..50 {
        let zz: f64 = z_back.value().row(i).iter().map(|v| v * v).sum();
        let via_layer = normal - 0.5 * zz + ld.data()[i];
        assert!((via_layer - log_q.data()[i]).abs() < 1e-12);
        for j in 0..3 {
            assert!((z_back.value().get(i, j) - z.get(i, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_iterations_keep_the_initial_model() {
    let target = GaussianTarget::standard(2);
    let init = MeanFieldModel::from_moments(vec![0.3, 0.1], vec![1.2, 0.8]).unwrap();
    let fit = train_flow(init.clone(), &target, &quick(0, 7)).unwrap();
    assert_eq!(fit.best.flat_params(), init.flat_params());
    assert!(fit.trace.is_empty());
    assert_eq!(fit.best_iter, 0);
}

#[test]
fn training_is_deterministic() {
    let target = GaussianTarget::new(vec![1.0, 2.0], vec![0.5, 1.5]).unwrap();
    let cfg = KRnetConfig::with_schedule(2, vec![2], 2, 8).unwrap();
    let run = || {
        let mut m = vaekrnet::krnet::KRnetModel::new(cfg.clone(), &mut seeded_rng(8)).unwrap();
        m.mark_identity_initialized();
        train_flow(m, &target, &quick(300, 9)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.best.flat_params(), b.best.flat_params());
}

#[test]
fn two_stage_with_no_iterations_returns_the_start() {
    let mut rng = seeded_rng(10);
    let m = VaeKrnetModel::new(&VaeKrnetConfig::canonical(2, 1, 1, 4), &mut rng).unwrap();
    let target = GaussianTarget::standard(2);
    let out = train_two_stage(m.clone(), &target, &quick(0, 11), 0, 2.0).unwrap();
    assert_eq!(out.mean_model.best.flat_params(), m.flat_params());
    assert_eq!(out.variance_model.best.flat_params(), m.flat_params());
    assert!(train_two_stage(m.clone(), &target, &quick(0, 11), 0, f64::INFINITY).is_err());
    assert!(train_two_stage(m, &target, &quick(0, 11), 0, 1.0).is_err());
}

#[test]
fn validation_losses_respect_the_lower_bound() {
    let target = GaussianTarget::new(vec![1.0, -1.0], vec![0.5, 2.0]).unwrap().scaled(3.0);
    let bound = -target.log_norm_const().unwrap();
    let mut m = vaekrnet::krnet::KRnetModel::new(KRnetConfig::with_schedule(2, vec![2], 2, 8).unwrap(), &mut seeded_rng(12)).unwrap();
    m.mark_identity_initialized();
    let fit = train_flow(m, &target, &quick(2000, 13)).unwrap();
    for r in &fit.trace {
        assert!(r.val_loss >= bound - 3.0 * r.val_se, "{} < {bound} - 3 * {}", r.val_loss, r.val_se);
    }
    assert!(fit.best_val - bound < 0.05, "gap {}", fit.best_val - bound);

    let mut rng = seeded_rng(14);
    let vm = VaeKrnetModel::new(&VaeKrnetConfig::canonical(2, 1, 1, 8), &mut rng).unwrap();
    let fit = train_vae_krnet(vm, &target, &quick(1000, 15)).unwrap();
    for r in &fit.trace {
        assert!(r.val_loss >= bound - 3.0 * r.val_se);
    }
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig { iterations: 1000, lr: 1e-3, lr_final: Some(1e-5), ..TrainConfig::default() };
    assert_eq!(cfg.lr_at(1), 1e-3);
    assert_eq!(cfg.lr_at(500), 1e-3);
    assert!((cfg.lr_at(750) - 1e-4).abs() < 1e-15);
    assert!((cfg.lr_at(1000) - 1e-5).abs() < 1e-17);
    assert!(TrainConfig { lr_final: Some(1e-2), ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { batch: 0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { lambda: Lambda::Finite(0.5), ..cfg }.validate().is_err());
}

#[test]
fn krnet_loss_gradient() {
    let mut model = random_krnet(KRnetConfig::with_schedule(4, vec![4, 2], 2, 8).unwrap().with_rotation(true), 16, 0.2);
    let target = GaussianTarget::new(vec![0.1, 0.2, -0.3, 0.4], vec![1.0, 0.5, 2.0, 1.3]).unwrap();
    let z = gauss_sample(&mut seeded_rng(17), 8, 4);
    let err = grad_check(&mut model, |m, g| Ok(krnet_vb_loss_values(m, &target, g, &z)?.mean())).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn vae_krnet_loss_gradient() {
    let mut rng = seeded_rng(18);
    let cfg = VaeKrnetConfig::canonical(3, 2, 1, 6)
        .with_prior_flow(LatentFlowSpec::new(1, 6))
        .with_encoder_flow(LatentFlowSpec::new(1, 6));
    let mut m = VaeKrnetModel::new(&cfg, &mut rng).unwrap();
    jitter(&mut m, &mut rng, 0.2);
    let target = GaussianTarget::standard(3);
    let noise = gauss_sample(&mut rng, 8, vae_noise_dim(&m));
    for lambda in [Lambda::Infinite, Lambda::Finite(2.5)] {
        let err = grad_check(&mut m, |m, g| Ok(vae_krnet_vb_terms(m, &target, g, &noise)?.loss(lambda).mean())).unwrap();
        assert!(err < 1e-4, "{lambda}: relative error {err}");
    }
}

#[test]
fn shape_mismatches_are_errors() {
    let mf = MeanFieldModel::new(2);
    let g = Graph::no_grad();
    assert!(krnet_vb_loss_values(&mf, &GaussianTarget::standard(3), &g, &Tensor::zeros(&[4, 2])).is_err());
    let enc = GaussHead::new(2, 1, 0, 1, &mut seeded_rng(19)).unwrap();
    let dec = GaussHead::new(1, 2, 0, 1, &mut seeded_rng(20)).unwrap();
    let m = VaeKrnetModel::from_parts(enc, dec, None, None).unwrap();
    assert!(vae_krnet_vb_terms(&m, &GaussianTarget::standard(2), &g, &Tensor::zeros(&[4, 2])).is_err());
}
