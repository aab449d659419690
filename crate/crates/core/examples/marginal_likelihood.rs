//! Estimating `log p(y)` for a VAE: plain Monte Carlo over the prior versus
//! importance sampling with the encoder. With a linear decoder and the exact
//! Gaussian posterior as encoder the answer is known, and the importance
//! weights are constant.
//!
//! cargo run --release --example marginal_likelihood

use nalgebra::DMatrix;
use vaekrnet::numerics::{seeded_rng, Tensor};
use vaekrnet::vae::{linear_gauss_posterior, GaussHead};
use vaekrnet::vae_krnet::{mean_and_se, VaeKrnetModel};
use vaekrnet::Result;

fn main() -> Result<()> {
    let (n, d, sigma) = (3, 1, 0.3_f64);
    let a = Tensor::matrix(n, d, vec![1.0, -0.5, 2.0])?;
    let decoder = GaussHead::affine(a.transpose(), vec![0.0; n], vec![sigma.ln(); n])?;

    // x | y ~ N(S A^T y / sigma^2, S) is affine in y; with d = 1, S is a scalar.
    let (_, post_cov) = linear_gauss_posterior(&a, sigma, &Tensor::identity(d), &[0.0; 3])?;
    let s = post_cov.get(0, 0);
    let gain = Tensor::matrix(n, d, a.data().iter().map(|v| v * s / (sigma * sigma)).collect())?;
    let encoder = GaussHead::affine(gain, vec![0.0; d], vec![0.5 * s.ln()])?;
    let model = VaeKrnetModel::from_parts(encoder, decoder, None, None)?;

    let y = [0.8, -0.2, 1.9];
    let am = DMatrix::from_row_slice(n, d, a.data());
    let cov = &am * am.transpose() + DMatrix::identity(n, n) * sigma * sigma;
    let yv = DMatrix::from_row_slice(n, 1, &y);
    let quad = (yv.transpose() * cov.clone().try_inverse().unwrap() * &yv)[(0, 0)];
    let exact = -0.5 * (quad + cov.determinant().ln() + n as f64 * std::f64::consts::TAU.ln());
    println!("exact log p(y) = {exact:.5}");

    for count in [10, 100, 1000] {
        let mut rng = seeded_rng(count as u64);
        let prior: Vec<f64> = (0..50).map(|_| model.marginal_log_pdf_prior_mc(&y, count, &mut rng)).collect::<Result<_>>()?;
        let is: Vec<f64> = (0..50).map(|_| model.marginal_log_pdf_importance(&y, count, &mut rng)).collect::<Result<_>>()?;
        let (pm, pse) = mean_and_se(&prior);
        let (im, ise) = mean_and_se(&is);
        println!("N = {count:>4}: prior MC {pm:.5} (se {pse:.1e}), importance {im:.5} (se {ise:.1e})");
    }
    Ok(())
}
