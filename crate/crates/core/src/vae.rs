//! Canonical VAE: Gaussian encoder/decoder heads and the evidence lower bound.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{gauss_sample, std_normal_logpdf, Graph, MlpNet, Param, Parameterized, Tensor, Var, HALF_LN_2PI};

/// Bound applied to every predicted log standard deviation.
pub const LOG_STD_CLAMP: f64 = 7.0;

/// Network producing a mean and a clamped log-std for a diagonal Gaussian.
#[derive(Debug, Clone)]
pub struct GaussHead {
    net: MlpNet,
    out: usize,
}

impl GaussHead {
    /// `depth` hidden layers of `width` units. `depth = 0` gives an affine head.
    pub fn new(input: usize, out: usize, depth: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if out == 0 || input == 0 {
            return Err(Error::Config("Gaussian head needs positive input and output sizes".into()));
        }
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(width, depth));
        widths.push(2 * out);
        Ok(Self { net: MlpNet::new(&widths, rng)?, out })
    }

    /// Affine head: `mu = x W + b`, `log_std = log_std_bias` for every input.
    pub fn affine(weight: Tensor, bias: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        let (input, out) = (weight.rows(), weight.cols());
        if weight.rank() != 2 || bias.len() != out || log_std.len() != out {
            return Err(Error::Shape("affine head: weight [in, out], bias [out], log_std [out]".into()));
        }
        let mut head = Self::new(input, out, 0, 1, &mut crate::numerics::seeded_rng(0))?;
        let (w, b) = head.net.output_weights_mut();
        let mut full = Tensor::zeros(&[input, 2 * out]);
        for i in 0..input {
            for j in 0..out {
                full.set(i, j, weight.get(i, j));
            }
        }
        w.value = full;
        b.value = Tensor::vector([bias, log_std].concat());
        Ok(head)
    }

    /// Layer widths `[in, hidden.., 2*out]`.
    pub fn widths(&self) -> &[usize] {
        self.net.widths()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.out
    }

    pub fn depth(&self) -> usize {
        self.net.widths().len() - 2
    }

    pub fn width(&self) -> usize {
        if self.depth() == 0 {
            0
        } else {
            self.net.widths()[1]
        }
    }

    /// `(mu, log_std)` for a batch `[M, in]`, each `[M, out]`.
    pub fn forward(&self, g: &Graph, x: &Var) -> Result<(Var, Var)> {
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!("Gaussian head expects a batch, got {:?}", x.shape())));
        }
        let h = self.net.forward(g, x)?;
        let mu = h.slice_cols(0, self.out);
        let log_std = h.slice_cols(self.out, 2 * self.out).clamp(-LOG_STD_CLAMP, LOG_STD_CLAMP);
        Ok((mu, log_std))
    }
}

impl Parameterized for GaussHead {
    fn params(&self) -> Vec<&Param> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }
}

/// Diagonal Gaussian `N(mean, diag(std^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape("mean and std lengths differ".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("standard deviations must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape(format!("point has {} entries, density {}", x.len(), self.mean.len())));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| -HALF_LN_2PI - s.ln() - 0.5 * ((x - m) / s).powi(2))
            .sum())
    }
}

/// Row-wise `log N(x; mu, diag(exp(log_std)^2))` for batches `[M, k]`.
pub fn diag_gauss_log_pdf(x: &Var, mu: &Var, log_std: &Var) -> Var {
    let k = x.cols() as f64;
    let r = x.sub(mu).mul(&log_std.neg().exp());
    r.square().scale(-0.5).sub(log_std).sum_cols().add_scalar(-k * HALF_LN_2PI)
}

/// Repeats the rows of `y` `times` times, block after block.
pub(crate) fn tile_rows(y: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(y.len() * times);
    for _ in 0..times {
        data.extend_from_slice(y.data());
    }
    Tensor::new(&[y.rows() * times, y.cols()], data).expect("tiled shape")
}

/// Averages a `[J * M]` vector laid out in `J` blocks of `M` into `[M]`.
pub(crate) fn block_mean(v: &Var, blocks: usize) -> Var {
    if blocks == 1 {
        return v.clone();
    }
    let m = v.value().len() / blocks;
    v.reshape(&[blocks, m]).sum_rows().scale(1.0 / blocks as f64)
}

pub(crate) fn as_batch(y: &Tensor) -> Tensor {
    if y.rank() == 1 {
        y.clone().reshape(&[1, y.len()]).expect("row view")
    } else {
        y.clone()
    }
}

/// Single-draw ELBO per row of `y` using the given standard normal noise
/// (`xi` has the same number of rows as `y`).
pub fn elbo_canonical_with_noise(g: &Graph, encoder: &GaussHead, decoder: &GaussHead, y: &Var, xi: &Tensor) -> Result<Var> {
    if xi.rows() != y.rows() || xi.cols() != encoder.output_dim() {
        return Err(Error::Shape(format!("noise {:?} does not match batch {:?}", xi.shape(), y.shape())));
    }
    let (mu_en, log_std_en) = encoder.forward(g, y)?;
    let xi = g.constant(xi.clone());
    let x = mu_en.add(&xi.mul(&log_std_en.exp()));
    let log_q = std_normal_logpdf(&xi).sub(&log_std_en.sum_cols());
    let log_prior = std_normal_logpdf(&x);
    let (mu_de, log_std_de) = decoder.forward(g, &x)?;
    let log_lik = diag_gauss_log_pdf(y, &mu_de, &log_std_de);
    let elbo = log_lik.add(&log_prior).sub(&log_q);
    if !elbo.value().all_finite() {
        return Err(Error::NonFinite("ELBO".into()));
    }
    Ok(elbo)
}

/// `J`-sample reparameterized ELBO for each row of `y`, as `[M]`.
pub fn elbo_canonical(
    g: &Graph,
    encoder: &GaussHead,
    decoder: &GaussHead,
    y: &Tensor,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    if samples == 0 {
        return Err(Error::Config("ELBO needs at least one sample".into()));
    }
    let y = as_batch(y);
    let tiled = tile_rows(&y, samples);
    let xi = gauss_sample(rng, tiled.rows(), encoder.output_dim());
    let per = elbo_canonical_with_noise(g, encoder, decoder, &g.constant(tiled), &xi)?;
    Ok(block_mean(&per, samples))
}

/// Posterior of `x` in `y = A x + sigma e` with prior `N(0, prior_cov)`:
/// `Sigma = (prior_cov^-1 + A^T A / sigma^2)^-1`, `mu = Sigma A^T y / sigma^2`.
pub fn linear_gauss_posterior(a: &Tensor, sigma: f64, prior_cov: &Tensor, y: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    let (n, d) = (a.rows(), a.cols());
    if prior_cov.shape() != [d, d] || y.len() != n {
        return Err(Error::Shape("posterior: A [n, d], prior [d, d], y [n]".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("noise level must be positive, got {sigma}")));
    }
    let am = DMatrix::from_row_slice(n, d, a.data());
    let pm = DMatrix::from_row_slice(d, d, prior_cov.data());
    let prior_prec = pm.try_inverse().ok_or_else(|| Error::Singular("prior covariance".into()))?;
    let s2 = sigma * sigma;
    let prec = prior_prec + am.transpose() * &am / s2;
    let cov = prec.try_inverse().ok_or_else(|| Error::Singular("posterior precision".into()))?;
    let mu = &cov * am.transpose() * DVector::from_column_slice(y) / s2;
    let cov_t = Tensor::new(&[d, d], cov.transpose().as_slice().to_vec())?;
    Ok((mu.as_slice().to_vec(), cov_t))
}
