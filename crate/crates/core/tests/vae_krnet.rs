mod common;

use common::{gauss_log_pdf, integrate_2d, jitter, LinearOracle};
use nalgebra::{DMatrix, DVector};
use vaekrnet::krnet::{KRnetConfig, KRnetModel};
use vaekrnet::numerics::{gauss_sample, grad_check, seeded_rng, Graph, Parameterized, Tensor};
use vaekrnet::vae::{DiagGaussian, GaussHead};
use vaekrnet::vae_krnet::{LatentFlowSpec, VaeKrnetConfig, VaeKrnetModel};

fn flows_model(n: usize, d: usize, seed: u64, noise: f64) -> VaeKrnetModel {
    let mut rng = seeded_rng(seed);
    let cfg = VaeKrnetConfig::canonical(n, d, 1, 8)
        .with_prior_flow(LatentFlowSpec::new(2, 8))
        .with_encoder_flow(LatentFlowSpec::new(2, 8));
    let mut m = VaeKrnetModel::new(&cfg, &mut rng).unwrap();
    jitter(m.prior_flow.as_mut().unwrap(), &mut rng, noise);
    jitter(m.encoder_flow.as_mut().unwrap(), &mut rng, noise);
    m
}

/// Encoder with `mu = 0`, `sigma = 1`, so `x = u`.
fn unit_encoder(n: usize, d: usize) -> GaussHead {
    GaussHead::affine(Tensor::zeros(&[n, d]), vec![0.0; d], vec![0.0; d]).unwrap()
}

#[test]
fn identity_flows_reduce_to_the_canonical_model() {
    let m = flows_model(4, 2, 1, 0.0);
    let plain = VaeKrnetModel::from_parts(m.encoder.clone(), m.decoder.clone(), None, None).unwrap();
    let mut rng = seeded_rng(2);
    let y = gauss_sample(&mut rng, 32, 4);
    let xi = gauss_sample(&mut rng, 32, 2);
    let g = Graph::no_grad();
    let yv = g.constant(y.clone());
    let a = m.elbo_with_noise(&g, &yv, &xi).unwrap();
    let b = plain.elbo_with_noise(&g, &yv, &xi).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12, "{u} vs {v}");
    }
    let x = gauss_sample(&mut rng, 1, 2);
    let p = m.prior_log_pdf(x.data()).unwrap();
    assert!((p - DiagGaussian::new(vec![0.0; 2], vec![1.0; 2]).unwrap().log_pdf(x.data()).unwrap()).abs() < 1e-12);
}

#[test]
fn latent_densities_integrate_to_one() {
    let m = flows_model(3, 2, 3, 0.3);
    let prior = integrate_2d(
        |x| {
            let g = Graph::no_grad();
            m.prior_log_pdf_batch(&g, &g.constant(x.clone())).unwrap().data().to_vec()
        },
        10.0,
        401,
    );
    assert!((prior - 1.0).abs() < 0.01, "prior mass {prior}");

    let y = [0.4, -0.3, 1.1];
    let enc = integrate_2d(
        |x| {
            let g = Graph::no_grad();
            let ys: Vec<f64> = (0..x.rows()).flat_map(|_| y).collect();
            let yt = Tensor::matrix(x.rows(), 3, ys).unwrap();
            m.encoder_cond_log_pdf_batch(&g, &g.constant(x.clone()), &g.constant(yt)).unwrap().data().to_vec()
        },
        12.0,
        401,
    );
    assert!((enc - 1.0).abs() < 0.01, "encoder mass {enc}");
}

#[test]
fn encoder_sample_without_flow_is_shifted_noise() {
    let w = Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap();
    let enc = GaussHead::affine(w, vec![0.2], vec![0.4f64.ln()]).unwrap();
    let dec = GaussHead::affine(Tensor::zeros(&[1, 2]), vec![0.0; 2], vec![0.0; 2]).unwrap();
    let m = VaeKrnetModel::from_parts(enc, dec, None, None).unwrap();
    let mut rng = seeded_rng(4);
    let y = [1.0, 0.5];
    let mu = 0.2 + 0.5 * 1.0 - 0.5;
    let mut xs = Vec::new();
    for _ in 0..20_000 {
        let (x, xi) = m.encoder_sample(&y, &mut rng).unwrap();
        assert!((x[0] - (mu + 0.4 * xi[0])).abs() < 1e-12);
        xs.push(x[0]);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!((mean - mu).abs() < 3.0 * 0.4 / (xs.len() as f64).sqrt());
    assert!((var.sqrt() - 0.4).abs() < 0.01);
    let lq = m.encoder_cond_log_pdf(&[0.37], &y).unwrap();
    let want = DiagGaussian::new(vec![mu], vec![0.4]).unwrap().log_pdf(&[0.37]).unwrap();
    assert!((lq - want).abs() < 1e-12);
    assert!(m.encoder_cond_log_pdf(&[mu], &y).unwrap() > m.encoder_cond_log_pdf(&[mu + 0.8], &y).unwrap());
}

/// A single rotation with `L = 0` and upper-triangular `U` draws `u = U^-1 xi`.
fn rotated_encoder_model(upper: [f64; 4]) -> VaeKrnetModel {
    let mut rng = seeded_rng(5);
    let cfg = KRnetConfig::with_schedule(2, vec![2], 1, 4).unwrap().with_rotation(true);
    let mut flow = KRnetModel::new(cfg, &mut rng).unwrap();
    flow.mark_identity_initialized();
    flow.params_mut()[1].value = Tensor::matrix(2, 2, upper.to_vec()).unwrap();
    let dec = GaussHead::affine(Tensor::zeros(&[2, 3]), vec![0.0; 3], vec![0.0; 3]).unwrap();
    VaeKrnetModel::from_parts(unit_encoder(3, 2), dec, None, Some(flow)).unwrap()
}

#[test]
fn rotated_encoder_has_the_implied_covariance() {
    let upper = [2.0, 0.5, 0.0, 0.8];
    let m = rotated_encoder_model(upper);
    let u = DMatrix::from_row_slice(2, 2, &upper);
    let ui = u.clone().try_inverse().unwrap();
    let cov = &ui * ui.transpose();

    let mut rng = seeded_rng(6);
    let y = [0.1, 0.2, 0.3];
    let draws: Vec<Vec<f64>> = (0..100_000).map(|_| m.encoder_sample(&y, &mut rng).unwrap().0).collect();
    let n = draws.len() as f64;
    let mean: Vec<f64> = (0..2).map(|i| draws.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    for i in 0..2 {
        for j in 0..2 {
            let c = draws.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / n;
            assert!((c - cov[(i, j)]).abs() < 0.02, "cov[{i},{j}] {c} vs {}", cov[(i, j)]);
        }
    }

    for x in [[0.0, 0.0], [0.3, -0.7], [-1.2, 2.0]] {
        let lq = m.encoder_cond_log_pdf(&x, &y).unwrap();
        assert!((lq - gauss_log_pdf(&x, &cov)).abs() < 1e-10);
    }
}

#[test]
fn exact_posterior_closes_the_gap_with_identity_flows() {
    let o = LinearOracle::orthonormal(5, 2, 0.4, 7);
    let mut rng = seeded_rng(8);
    let base = flows_model(5, 2, 9, 0.0);
    let m = VaeKrnetModel::from_parts(o.posterior_encoder(), o.decoder(), base.prior_flow, base.encoder_flow).unwrap();
    let y = o.sample_y(16, 10);
    let g = Graph::no_grad();
    let e = m.elbo(&g, &y, &mut rng).unwrap();
    for (i, v) in e.data().iter().enumerate() {
        assert!((v - o.log_evidence(y.row(i))).abs() < 1e-9);
    }
}

#[test]
fn prior_mc_is_exact_when_the_decoder_ignores_the_latent() {
    let dec = GaussHead::affine(Tensor::zeros(&[2, 3]), vec![0.5, -0.5, 1.0], vec![0.2f64.ln(); 3]).unwrap();
    let base = flows_model(3, 2, 11, 0.3);
    let m = VaeKrnetModel::from_parts(base.encoder, dec, base.prior_flow, None).unwrap();
    let y = [0.4, -0.1, 0.8];
    let want = DiagGaussian::new(vec![0.5, -0.5, 1.0], vec![0.2; 3]).unwrap().log_pdf(&y).unwrap();
    let got = m.marginal_log_pdf_prior_mc(&y, 500, &mut seeded_rng(12)).unwrap();
    assert!((got - want).abs() < 1e-10);
}

#[test]
fn single_draw_prior_mc_is_the_likelihood_at_that_draw() {
    let m = flows_model(3, 2, 13, 0.2);
    let y = [0.2, 0.1, -0.4];
    let rng = seeded_rng(14);
    let x = m.sample_prior(1, &mut rng.clone()).unwrap();
    let g = Graph::no_grad();
    let want = m.decoder_log_lik(&g, &g.constant(Tensor::matrix(1, 3, y.to_vec()).unwrap()), &g.constant(x)).unwrap().item();
    let got = m.marginal_log_pdf_prior_mc(&y, 1, &mut rng.clone()).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn prior_mc_matches_the_closed_form() {
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.4, 0.7, 0.3, 0.5]);
    let o = LinearOracle::new(a.clone(), 0.5);
    let m = o.model(o.posterior_encoder());
    let y = [0.6, -0.2, 0.3];
    let count = 100_000;
    let got = m.marginal_log_pdf_prior_mc(&y, count, &mut seeded_rng(15)).unwrap();
    let truth = o.log_evidence(&y);
    // delta method: Var(w) / p^2 with E[p(y|x)^2] = (4 pi s^2)^{-n/2} N(y; 0, s^2/2 I + A A^T)
    let s2 = 0.25;
    let half = DMatrix::identity(3, 3) * (s2 / 2.0) + &a * a.transpose();
    let second = -1.5 * (4.0 * std::f64::consts::PI * s2).ln() + gauss_log_pdf(&y, &half);
    let rel_var = (second - 2.0 * truth).exp() - 1.0;
    let se = (rel_var / count as f64).sqrt();
    assert!((got - truth).abs() < 3.0 * se, "{got} vs {truth} (se {se})");
}

#[test]
fn importance_sampling_with_the_prior_as_proposal_is_prior_mc() {
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.4, 0.7, 0.3, 0.5]);
    let o = LinearOracle::new(a, 0.5);
    let m = o.model(unit_encoder(3, 2));
    let y = [0.6, -0.2, 0.3];
    let p = m.marginal_log_pdf_prior_mc(&y, 2000, &mut seeded_rng(16)).unwrap();
    let q = m.marginal_log_pdf_importance(&y, 2000, &mut seeded_rng(16)).unwrap();
    assert!((p - q).abs() < 1e-10);
}

#[test]
fn a_posterior_like_proposal_reduces_variance() {
    let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -0.4, 0.7, 0.3, 0.5, 0.8, -0.6]);
    let o = LinearOracle::new(a, 0.3);
    let m = o.model(o.posterior_encoder());
    let y = [0.9, -0.4, 0.2, 0.7];
    let var = |v: &[f64]| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let mut rng = seeded_rng(17);
    let prior: Vec<f64> = (0..50).map(|_| m.marginal_log_pdf_prior_mc(&y, 1000, &mut rng).unwrap()).collect();
    let is: Vec<f64> = (0..50).map(|_| m.marginal_log_pdf_importance(&y, 1000, &mut rng).unwrap()).collect();
    assert!(var(&is) < var(&prior), "{} vs {}", var(&is), var(&prior));
}

#[test]
fn exact_posterior_proposal_has_no_variance() {
    let o = LinearOracle::orthonormal(4, 2, 0.3, 18);
    let m = o.model(o.posterior_encoder());
    let y = o.sample_y(3, 19);
    let mut rng = seeded_rng(20);
    for i in 0..3 {
        let est = m.marginal_log_pdf_importance(y.row(i), 64, &mut rng).unwrap();
        assert!((est - o.log_evidence(y.row(i))).abs() < 1e-9);
    }
}

#[test]
fn estimators_validate_inputs() {
    let m = flows_model(3, 2, 21, 0.0);
    let mut rng = seeded_rng(22);
    assert!(m.marginal_log_pdf_prior_mc(&[0.0; 3], 0, &mut rng).is_err());
    assert!(m.marginal_log_pdf_importance(&[0.0; 2], 10, &mut rng).is_err());
    let dec = GaussHead::affine(Tensor::zeros(&[3, 2]), vec![0.0; 2], vec![0.0; 2]).unwrap();
    assert!(VaeKrnetModel::from_parts(unit_encoder(2, 2), dec, None, None).is_err());
}

#[test]
fn elbo_gradient_with_both_flows() {
    let mut m = flows_model(4, 2, 23, 0.3);
    let mut rng = seeded_rng(24);
    jitter(&mut m.encoder, &mut rng, 0.2);
    let y = gauss_sample(&mut rng, 6, 4);
    let xi = gauss_sample(&mut rng, 6, 2);
    let err = grad_check(&mut m, |m, g| Ok(m.elbo_with_noise(g, &g.constant(y.clone()), &xi)?.mean())).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn decoder_mean_is_the_linear_map() {
    let o = LinearOracle::orthonormal(3, 2, 0.2, 25);
    let g = Graph::no_grad();
    let x = DVector::from_column_slice(&[0.3, -1.0]);
    let (mu, ls) = o.decoder().forward(&g, &g.constant(Tensor::matrix(1, 2, x.as_slice().to_vec()).unwrap())).unwrap();
    let want = &o.a * x;
    for i in 0..3 {
        assert!((mu.data()[i] - want[i]).abs() < 1e-14);
        assert!((ls.data()[i] - 0.2f64.ln()).abs() < 1e-14);
    }
}
