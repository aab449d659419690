//! Data whose latent prior has holes cut out of a Gaussian. A learned KRnet
//! prior and a flow-based encoder are compared with the canonical VAE at the
//! same budget; `h(Y)` comes from nested Monte Carlo.
//!
//! cargo run --release --example vae_krnet_hole_prior

use vaekrnet::experiments::{delta_metric, LinearLatentProblem, PriorKind};
use vaekrnet::numerics::seeded_rng;
use vaekrnet::vae_krnet::{train_on_data, DataTrainConfig, LatentFlowSpec, VaeKrnetConfig, VaeKrnetModel};
use vaekrnet::Result;

fn main() -> Result<()> {
    let mut rng = seeded_rng(7);
    let problem = LinearLatentProblem::generate(10, 2, 0.1, PriorKind::Hole2d, &mut rng)?;
    let data = problem.gen_linear_data(30_000, &mut rng)?;
    let val = problem.gen_linear_data(10_000, &mut rng)?;
    let (h_y, se) = problem.entropy_hy_nested_mc(2000, 10_000, &mut rng)?;
    println!("h(Y) = {h_y:.4} (se {se:.4})");

    let flow = LatentFlowSpec::new(2, 24);
    let base = VaeKrnetConfig::canonical(10, 2, 1, 32);
    let variants = [
        ("canonical", base.clone()),
        ("KRnet prior", base.clone().with_prior_flow(flow)),
        ("KRnet prior + encoder", base.with_prior_flow(flow).with_encoder_flow(flow)),
    ];
    for (name, cfg) in variants {
        let model = VaeKrnetModel::new(&cfg, &mut seeded_rng(11))?;
        let train = DataTrainConfig { epochs: 30, batch_size: 500, lr: 1e-3, eval_every: 10, seed: 3 };
        let fit = train_on_data(model, &data, &val, &train, |_| true)?;
        println!("{name:<22} delta {:.4}", delta_metric(fit.best_val_elbo, h_y));

        // Latent draws from the learned prior that fall inside a hole.
        if let (Some(prior), Some(hole)) = (&fit.best.prior_flow, &problem.hole) {
            let x = prior.sample(20_000, &mut seeded_rng(1))?;
            let inside = (0..x.rows()).filter(|&i| !hole.accepts(x.row(i))).count();
            println!("{:<22} prior mass inside the holes {:.3}", "", inside as f64 / x.rows() as f64);
        }
    }
    Ok(())
}
