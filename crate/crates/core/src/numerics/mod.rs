//! Tensors, reverse-mode differentiation, Adam, seeded sampling and MLPs.

mod adam;
mod autodiff;
mod gradcheck;
mod mlp;
mod param;
pub(crate) mod pwq;
mod rng;
mod tensor;

pub use adam::Adam;
pub use autodiff::{invert, Graph, Var};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, GRAD_CHECK_STEP};
pub use mlp::MlpNet;
pub use param::{Gradients, Param, ParamId, Parameterized};
pub use rng::{gauss_sample, seeded_rng, std_normal_logpdf_rows, SeededRng};
pub use tensor::Tensor;


/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Row-wise standard normal log density of a batch `[M, k]`, as `[M]`.
pub fn std_normal_logpdf(z: &Var) -> Var {
    let k = z.cols() as f64;
    z.square().sum_cols().scale(-0.5).add_scalar(-k * HALF_LN_2PI)
}
