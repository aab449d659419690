//! Saving trained models as text manifests, reloading them, and sampling the
//! reloaded copy; the round trip is bit-exact.
//!
//! cargo run --release --example saved_models

use vaekrnet::cli::sample_model;
use vaekrnet::experiments::{InverseProblem, InverseSpec};
use vaekrnet::krnet::{KRnetConfig, KRnetModel};
use vaekrnet::manifest::{load_manifest, save_manifest, SavedModel};
use vaekrnet::numerics::seeded_rng;
use vaekrnet::vb::{train_flow, TrainConfig};
use vaekrnet::Result;

fn main() -> Result<()> {
    let problem = InverseProblem::generate(&InverseSpec::new(3, 0))?;
    let mut model = KRnetModel::new(KRnetConfig::stepped(3, 1, 3, 2, 16)?.with_rotation(true), &mut seeded_rng(0))?;
    model.mark_identity_initialized();
    let cfg = TrainConfig { iterations: 500, val_size: 5000, val_every: 250, ..TrainConfig::default() };
    let fit = train_flow(model, &problem, &cfg)?;

    let dir = std::env::temp_dir().join("vaekrnet-saved-models-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("krnet.manifest");
    let saved = SavedModel::Krnet(fit.best);
    save_manifest(&saved, &path)?;
    let text = std::fs::read_to_string(&path)?;
    println!("{} ({} lines); first lines:", path.display(), text.lines().count());
    for line in text.lines().take(4) {
        println!("  {}", if line.len() > 90 { &line[..90] } else { line });
    }

    let back = load_manifest(&path)?;
    let a = sample_model(&saved, 1000, 7)?;
    let b = sample_model(&back, 1000, 7)?;
    println!("samples identical after reload: {}", a.data() == b.data());
    Ok(())
}
