//! A canonical VAE fitted to data from a linear-Gaussian latent model, where
//! the data entropy `h(Y)` is known in closed form. `delta = -ELBO - h(Y)`
//! measures the remaining gap.
//!
//! cargo run --release --example vae_linear_gaussian

use vaekrnet::experiments::{delta_metric, LinearLatentProblem, PriorKind};
use vaekrnet::numerics::seeded_rng;
use vaekrnet::vae_krnet::{train_on_data, DataTrainConfig, VaeKrnetConfig, VaeKrnetModel};
use vaekrnet::Result;

fn main() -> Result<()> {
    let mut rng = seeded_rng(0);
    let problem = LinearLatentProblem::generate(10, 2, 0.1, PriorKind::Gaussian, &mut rng)?;
    let data = problem.gen_linear_data(20_000, &mut rng)?;
    let val = problem.gen_linear_data(5_000, &mut rng)?;
    let h_y = problem.entropy_hy_analytic()?;
    println!("h(Y) = {h_y:.4}");

    let model = VaeKrnetModel::new(&VaeKrnetConfig::canonical(10, 2, 2, 32), &mut rng)?;
    let cfg = DataTrainConfig { epochs: 60, batch_size: 500, lr: 1e-3, eval_every: 10, seed: 1 };
    let fit = train_on_data(model, &data, &val, &cfg, |r| {
        println!("epoch {:>3}  validation ELBO {:.4} (se {:.4})  delta {:.4}", r.epoch, r.val_elbo, r.val_se, delta_metric(r.val_elbo, h_y));
        true
    })?;
    println!("best delta {:.4}", delta_metric(fit.best_val_elbo, h_y));

    // The fitted generative model reproduces the data covariance.
    let y = fit.best.sample(50_000, &mut rng)?;
    let exact = problem.data_covariance()?;
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        for j in 0..10 {
            let c = (0..y.rows()).map(|s| y.get(s, i) * y.get(s, j)).sum::<f64>() / y.rows() as f64;
            worst = worst.max((c - exact[(i, j)]).abs());
        }
    }
    println!("max covariance error of generated data {worst:.3}");
    Ok(())
}
