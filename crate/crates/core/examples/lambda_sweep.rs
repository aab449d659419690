//! VAE-KRnet as a variational posterior. Stage one minimizes the KL loss
//! (`lambda = inf`); stage two continues with a finite `lambda`, which adds a
//! mutual-information term that inflates the spread of the samples.
//!
//! cargo run --release --example lambda_sweep

use vaekrnet::experiments::{stats_r, uniform_grid, InverseProblem, InverseSpec};
use vaekrnet::numerics::seeded_rng;
use vaekrnet::vae_krnet::{LatentFlowSpec, VaeKrnetConfig, VaeKrnetModel};
use vaekrnet::vb::{continue_with, train_vae_krnet, Lambda, TrainConfig};
use vaekrnet::Result;

fn main() -> Result<()> {
    let problem = InverseProblem::generate(&InverseSpec::new(4, 0))?;
    let grid = uniform_grid(128);
    let cfg = VaeKrnetConfig::canonical(4, 2, 2, 32)
        .with_prior_flow(LatentFlowSpec::new(4, 24))
        .with_encoder_flow(LatentFlowSpec::new(2, 24));
    let model = VaeKrnetModel::new(&cfg, &mut seeded_rng(1))?;
    let train = TrainConfig { iterations: 3000, val_size: 20_000, val_every: 500, lr_final: Some(1e-5), ..TrainConfig::default() };
    let stage1 = train_vae_krnet(model, &problem, &train)?;
    println!("stage one: loss {:.4}, -log C {:.4}", stage1.best_val, -problem.log_norm_const()?);

    println!("{:>6} {:>10} {:>10}", "lambda", "mean err", "std err");
    for lambda in [Lambda::Finite(1.5), Lambda::Finite(2.0), Lambda::Finite(4.0), Lambda::Infinite] {
        let stage2 = continue_with(&stage1, &problem, &TrainConfig { iterations: 1500, lambda, seed: 5, ..train.clone() })?;
        let s = stats_r(&stage2.best.sample(50_000, &mut seeded_rng(2))?, &problem, &grid)?;
        println!("{:>6} {:>10.4} {:>10.4}", lambda.to_string(), s.mean_rel_err, s.std_rel_err);
    }
    Ok(())
}
