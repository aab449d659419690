use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `[rows, cols]` matrix of independent standard normal draws.
pub fn gauss_sample(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Sum over columns of the standard normal log density, one value per row.
pub fn std_normal_logpdf_rows(z: &Tensor) -> Vec<f64> {
    let c = z.cols();
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..z.rows())
        .map(|i| z.row(i).iter().map(|x| -0.5 * x * x).sum::<f64>() - c as f64 * half_ln_2pi)
        .collect()
}
