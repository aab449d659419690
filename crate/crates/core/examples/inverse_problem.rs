//! Bayesian inverse problem for the coefficients of a random field observed
//! through noisy point values. The posterior is Gaussian, so the normalizing
//! constant and the posterior statistics of the field are exact. KRnet and a
//! mean-field Gaussian are compared on the same budget.
//!
//! cargo run --release --example inverse_problem

use vaekrnet::experiments::{stats_from_moments, stats_r, uniform_grid, InverseProblem, InverseSpec};
use vaekrnet::krnet::{KRnetConfig, KRnetModel};
use vaekrnet::numerics::seeded_rng;
use vaekrnet::vb::{train_flow, MeanFieldModel, TargetDensity, TrainConfig, VariationalFlow};
use vaekrnet::Result;

fn main() -> Result<()> {
    let problem = InverseProblem::generate(&InverseSpec::new(4, 0))?;
    let log_c = problem.log_norm_const()?;
    let (mu, cov) = problem.true_posterior()?;
    let grid = uniform_grid(128);
    println!("n = {}, observations = {}, -log C = {:.4}", problem.dim(), problem.k.len(), -log_c);
    println!("posterior mean {mu:.3?}");

    let cfg = TrainConfig { iterations: 3000, val_size: 20_000, val_every: 500, lr_final: Some(1e-5), ..TrainConfig::default() };
    let mut krnet = KRnetModel::new(KRnetConfig::stepped(4, 1, 4, 4, 24)?, &mut seeded_rng(1))?;
    krnet.mark_identity_initialized();
    let kr = train_flow(krnet, &problem, &cfg)?;
    let mf = train_flow(MeanFieldModel::new(4), &problem, &TrainConfig { iterations: 30_000, val_every: 5000, lr: 1e-2, ..cfg.clone() })?;

    let exact = stats_from_moments(&mu, &cov, &problem, &grid)?;
    println!("{:<11} {:>10} {:>10} {:>10}", "model", "loss", "mean err", "std err");
    println!("{:<11} {:>10.4} {:>10.4} {:>10.4}", "exact", -log_c, exact.mean_rel_err, exact.std_rel_err);
    for (name, loss, samples) in [
        ("KRnet", kr.best_val, kr.best.sample(50_000, &mut seeded_rng(2))?),
        ("mean-field", mf.best_val, VariationalFlow::sample(&mf.best, 50_000, &mut seeded_rng(3))?),
    ] {
        let s = stats_r(&samples, &problem, &grid)?;
        println!("{name:<11} {loss:>10.4} {:>10.4} {:>10.4}", s.mean_rel_err, s.std_rel_err);
    }
    Ok(())
}
