//! Problem generators and analytic oracles: the linear latent model with
//! Gaussian or holed priors, and the linear Bayesian inverse problem.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gauss_sample, Graph, Tensor, Var, HALF_LN_2PI};
use crate::vae_krnet::{log_mean_exp, mean_and_se};
use crate::vb::TargetDensity;

/// Standard normal restricted to `|R(alpha, theta) x_pair| >= radius` for
/// each listed pair of adjacent coordinates, with
/// `R = diag(alpha, 1) * rotation(theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolePriorSpec {
    pub alpha: f64,
    /// One angle per adjacent pair `(x_i, x_{i+1})`.
    pub thetas: Vec<f64>,
    pub radius: f64,
}

/// Default hole radius.
pub const HOLE_RADIUS: f64 = 1.0;

impl HolePriorSpec {
    pub fn hole2d() -> Self {
        Self { alpha: 3.0, thetas: vec![PI / 4.0], radius: HOLE_RADIUS }
    }

    pub fn hole3d() -> Self {
        Self { alpha: 3.0, thetas: vec![PI / 4.0, 3.0 * PI / 4.0], radius: HOLE_RADIUS }
    }

    pub fn dims(&self) -> usize {
        self.thetas.len() + 1
    }

    /// `R x` for one pair.
    pub fn map_pair(&self, theta: f64, x: [f64; 2]) -> [f64; 2] {
        let (s, c) = theta.sin_cos();
        [self.alpha * (c * x[0] - s * x[1]), s * x[0] + c * x[1]]
    }

    /// Whether `x` lies outside every hole.
    pub fn accepts(&self, x: &[f64]) -> bool {
        self.thetas.iter().enumerate().all(|(i, &t)| {
            let r = self.map_pair(t, [x[i], x[i + 1]]);
            r[0].hypot(r[1]) >= self.radius
        })
    }
}

/// Proposals examined before a too-small acceptance rate is reported.
const PILOT_PROPOSALS: usize = 100_000;

/// Rejection sampling from the holed standard normal.
pub fn hole_prior_sample(spec: &HolePriorSpec, dims: usize, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if dims != spec.dims() || !(2..=3).contains(&dims) {
        return Err(Error::Config(format!("hole prior with {} angles needs {} dimensions, got {dims}", spec.thetas.len(), spec.dims())));
    }
    if !spec.radius.is_finite() || !(spec.alpha > 0.0) {
        return Err(Error::Config("hole radius must be finite and the stretch positive".into()));
    }
    let mut data = Vec::with_capacity(count * dims);
    let (mut proposed, mut accepted) = (0usize, 0usize);
    let mut x = vec![0.0; dims];
    while accepted < count {
        x.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        proposed += 1;
        if spec.accepts(&x) {
            data.extend_from_slice(&x);
            accepted += 1;
        }
        if proposed >= PILOT_PROPOSALS && (accepted as f64) < 1e-4 * proposed as f64 {
            return Err(Error::Config(format!(
                "hole prior accepts {accepted} of {proposed} proposals; the radius {} is too large",
                spec.radius
            )));
        }
    }
    Tensor::new(&[count, dims], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Gaussian,
    Hole2d,
    Hole3d,
}

impl PriorKind {
    pub fn latent_dim(&self, d: usize) -> usize {
        match self {
            Self::Gaussian => d,
            Self::Hole2d => 2,
            Self::Hole3d => 3,
        }
    }
}

/// `Y = A X + sigma * xi` with unit-norm columns of `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLatentProblem {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub prior: PriorKind,
    pub hole: Option<HolePriorSpec>,
    /// Rows of `A`, `n` by `d`.
    pub a: Vec<Vec<f64>>,
}

impl LinearLatentProblem {
    /// Draws `A` with standard normal columns scaled to unit length.
    pub fn generate(n: usize, d: usize, sigma: f64, prior: PriorKind, rng: &mut impl Rng) -> Result<Self> {
        let d = prior.latent_dim(d);
        if n == 0 || d == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(sigma >= 0.0) {
            return Err(Error::Config(format!("noise level must be non-negative, got {sigma}")));
        }
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| {
                let c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        let a = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let hole = match prior {
            PriorKind::Gaussian => None,
            PriorKind::Hole2d => Some(HolePriorSpec::hole2d()),
            PriorKind::Hole3d => Some(HolePriorSpec::hole3d()),
        };
        Ok(Self { n, d, sigma, prior, hole, a })
    }

    pub fn a_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.a).expect("rectangular A")
    }

    pub fn sample_prior(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        match &self.hole {
            None => Ok(gauss_sample(rng, count, self.d)),
            Some(h) => hole_prior_sample(h, self.d, count, rng),
        }
    }

    /// Rows `A x + sigma xi` for latent rows `x`.
    pub fn observe(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if x.cols() != self.d {
            return Err(Error::Shape(format!("latent rows have {} entries, expected {}", x.cols(), self.d)));
        }
        let mut y = x.matmul(&self.a_matrix().transpose());
        if self.sigma > 0.0 {
            y.data_mut().iter_mut().for_each(|v| *v += self.sigma * { let e: f64 = StandardNormal.sample(rng); e });
        }
        Ok(y)
    }

    pub fn gen_linear_data(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let x = self.sample_prior(count, rng)?;
        self.observe(&x, rng)
    }

    /// Covariance `sigma^2 I + A A^T` of `Y` under the standard normal prior.
    pub fn data_covariance(&self) -> Result<DMatrix<f64>> {
        if self.prior != PriorKind::Gaussian {
            return Err(Error::Config("closed-form covariance needs the Gaussian prior".into()));
        }
        let a = DMatrix::from_row_slice(self.n, self.d, self.a_matrix().data());
        Ok(DMatrix::identity(self.n, self.n) * self.sigma.powi(2) + &a * a.transpose())
    }

    /// `h(Y) = (n/2)(1 + log 2 pi) + 0.5 log|sigma^2 I + A A^T|`.
    pub fn entropy_hy_analytic(&self) -> Result<f64> {
        let cov = self.data_covariance()?;
        let chol = cov.cholesky().ok_or_else(|| Error::Singular("data covariance".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(self.n as f64 * (0.5 + HALF_LN_2PI) + 0.5 * log_det)
    }

    /// Nested Monte Carlo `h(Y) = -E_y[log E_x p(y|x)]`: `outer` data draws,
    /// each scored against a shared set of `inner` prior draws. Returns the
    /// estimate and its outer standard error.
    pub fn entropy_hy_nested_mc(&self, outer: usize, inner: usize, rng: &mut impl Rng) -> Result<(f64, f64)> {
        if outer < 2 || inner == 0 {
            return Err(Error::Config("nested estimate needs at least two outer and one inner draw".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("nested estimate needs positive noise".into()));
        }
        let ys = self.gen_linear_data(outer, rng)?;
        let means = self.sample_prior(inner, rng)?.matmul(&self.a_matrix().transpose());
        let s2 = self.sigma * self.sigma;
        let norm = -(self.n as f64) * (HALF_LN_2PI + self.sigma.ln());
        let mut logs = Vec::with_capacity(outer);
        let mut terms = vec![0.0; inner];
        for i in 0..outer {
            let y = ys.row(i);
            for (j, t) in terms.iter_mut().enumerate() {
                let m = means.row(j);
                let r2: f64 = y.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                *t = norm - 0.5 * r2 / s2;
            }
            let lp = log_mean_exp(&terms).map_err(|_| Error::Numerical("inner estimate of p(y) is zero".into()))?;
            logs.push(-lp);
        }
        Ok(mean_and_se(&logs))
    }
}

/// `delta = -E[ELBO] - h(Y)`, the expected encoder-posterior KL.
pub fn delta_metric(elbo_mean: f64, h_y: f64) -> f64 {
    -elbo_mean - h_y
}

/// How an inverse problem instance was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseSpec {
    pub n: usize,
    /// Collocation count `N_x`.
    pub nx: usize,
    /// Eigenvalue decay `lambda_i = i^-gamma`.
    pub gamma: f64,
    /// Correlation length of `b_ij = exp(-|i-j| / corr_len)`.
    pub corr_len: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// Eigenvalue decay used when none is given.
pub const DEFAULT_GAMMA: f64 = 3.0;
/// Collocation points per unknown used when none is given.
pub const DEFAULT_NX_PER_DIM: usize = 20;

impl InverseSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, nx: DEFAULT_NX_PER_DIM * n, gamma: DEFAULT_GAMMA, corr_len: 3.0, sigma: 0.05, seed }
    }
}

/// `y_hat = K y + sigma xi` with prior `N(0, diag(prior_var))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseProblem {
    pub spec: Option<InverseSpec>,
    pub x_points: Vec<f64>,
    /// Rows of `K`, `k` by `n`.
    pub k: Vec<Vec<f64>>,
    pub sigma: f64,
    pub prior_var: Vec<f64>,
    pub data: Vec<f64>,
    pub truth: Vec<f64>,
}

/// `e_i(x) = cos(i x) / sqrt(pi)`, `i >= 1`.
pub fn basis(i: usize, x: f64) -> f64 {
    (i as f64 * x).cos() / PI.sqrt()
}

impl InverseProblem {
    /// Builds `K = E B Lambda` from uniform collocation points and synthesizes
    /// data from `y0_i = i^-2 sin i`.
    pub fn generate(spec: &InverseSpec) -> Result<Self> {
        let (n, nx) = (spec.n, spec.nx);
        if n == 0 || nx == 0 || !(spec.sigma > 0.0) || !(spec.corr_len > 0.0) {
            return Err(Error::Config("inverse problem needs positive n, N_x, sigma and correlation length".into()));
        }
        let mut rng = crate::numerics::seeded_rng(spec.seed);
        let uni = Uniform::new(0.0, 2.0 * PI).map_err(|e| Error::Config(e.to_string()))?;
        let x_points: Vec<f64> = (0..nx).map(|_| uni.sample(&mut rng)).collect();
        let xi0: Vec<f64> = (0..nx).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = DMatrix::from_fn(nx, n, |j, i| basis(i + 1, x_points[j]));
        let b = DMatrix::from_fn(n, n, |i, j| (-(i as f64 - j as f64).abs() / spec.corr_len).exp());
        let lam = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| ((i + 1) as f64).powf(-spec.gamma)));
        let kmat = e * b * lam;
        let truth: Vec<f64> = (1..=n).map(|i| (i as f64).powi(-2) * (i as f64).sin()).collect();
        let clean = &kmat * DVector::from_column_slice(&truth);
        let data = (0..nx).map(|j| clean[j] + spec.sigma * xi0[j]).collect();
        let prior_var = (1..=n).map(|i| (i as f64).powf(-2.5)).collect();
        let k = (0..nx).map(|j| kmat.row(j).iter().copied().collect()).collect();
        Ok(Self { spec: Some(spec.clone()), x_points, k, sigma: spec.sigma, prior_var, data, truth })
    }

    /// A problem from explicit pieces (no collocation structure).
    pub fn from_parts(k: Vec<Vec<f64>>, data: Vec<f64>, sigma: f64, prior_var: Vec<f64>) -> Result<Self> {
        let n = prior_var.len();
        if k.len() != data.len() || k.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("K must be len(data) by len(prior_var)".into()));
        }
        if !(sigma > 0.0) || prior_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("noise and prior variances must be positive".into()));
        }
        Ok(Self { spec: None, x_points: Vec::new(), k, sigma, prior_var, data, truth: vec![0.0; n] })
    }

    pub fn n(&self) -> usize {
        self.prior_var.len()
    }

    fn kmat(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k.len(), self.n(), |j, i| self.k[j][i])
    }

    fn precision(&self) -> DMatrix<f64> {
        let k = self.kmat();
        let mut p = k.transpose() * &k / (self.sigma * self.sigma);
        for i in 0..self.n() {
            p[(i, i)] += 1.0 / self.prior_var[i];
        }
        p
    }

    /// `(mu_post, Sigma_post)` with `Sigma_post = (Sigma_pr^-1 + K^T K / sigma^2)^-1`.
    pub fn true_posterior(&self) -> Result<(Vec<f64>, Tensor)> {
        let chol = self.precision().cholesky().ok_or_else(|| Error::Singular("posterior precision".into()))?;
        let cov = chol.inverse();
        let rhs = self.kmat().transpose() * DVector::from_column_slice(&self.data) / (self.sigma * self.sigma);
        let mu = &cov * rhs;
        let n = self.n();
        let cov_t = Tensor::new(&[n, n], (0..n * n).map(|i| cov[(i / n, i % n)]).collect())?;
        Ok((mu.as_slice().to_vec(), cov_t))
    }

    /// `log C` for `C = integral of p_hat`.
    pub fn log_norm_const(&self) -> Result<f64> {
        let p = self.precision();
        let chol = p.clone().cholesky().ok_or_else(|| Error::Singular("posterior precision".into()))?;
        let log_det_cov = -2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let (mu, _) = self.true_posterior()?;
        let mu = DVector::from_column_slice(&mu);
        let quad_post = (mu.transpose() * &p * &mu)[(0, 0)];
        let data_sq: f64 = self.data.iter().map(|v| v * v).sum();
        let n = self.n() as f64;
        Ok(n * HALF_LN_2PI + 0.5 * log_det_cov - (0.5 * data_sq / (self.sigma * self.sigma) - 0.5 * quad_post))
    }

    /// `log p_hat(y)` at one point.
    pub fn log_unnormalized(&self, y: &[f64]) -> f64 {
        let fit: f64 = self
            .k
            .iter()
            .zip(&self.data)
            .map(|(row, d)| {
                let r = d - row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                r * r
            })
            .sum();
        let prior: f64 = y.iter().zip(&self.prior_var).map(|(v, s)| v * v / s).sum();
        -0.5 * fit / (self.sigma * self.sigma) - 0.5 * prior
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl TargetDensity for InverseProblem {
    fn dim(&self) -> usize {
        self.n()
    }

    fn log_density(&self, g: &Graph, y: &Var) -> Result<Var> {
        if y.shape().len() != 2 || y.cols() != self.n() {
            return Err(Error::Shape(format!("inverse problem of dimension {} got {:?}", self.n(), y.shape())));
        }
        let kt = Tensor::from_rows(&self.k)?.transpose();
        let resid = y.matmul(&g.constant(kt)).sub(&g.constant(Tensor::vector(self.data.clone())));
        let fit = resid.square().sum_cols().scale(-0.5 / (self.sigma * self.sigma));
        let prec = g.constant(Tensor::vector(self.prior_var.iter().map(|v| 1.0 / v).collect()));
        Ok(fit.sub(&y.square().mul(&prec).sum_cols().scale(0.5)))
    }

    fn log_norm_const(&self) -> Option<f64> {
        InverseProblem::log_norm_const(self).ok()
    }
}

/// `count` uniform points on `[0, 2 pi]`, endpoints included.
pub fn uniform_grid(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|i| 2.0 * PI * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Default grid size for statistics of `r(x)`.
pub const STATS_GRID: usize = 256;

/// Trapezoid-rule L2 norm of grid values.
pub fn l2_norm(x: &[f64], f: &[f64]) -> f64 {
    let s: f64 = x.windows(2).zip(f.windows(2)).map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] * f[0] + f[1] * f[1])).sum();
    s.sqrt()
}

/// Moments of `r(x; Y) = sum_i Y_i e_i(x)` against the exact posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub exact_mean: Vec<f64>,
    pub exact_var: Vec<f64>,
    /// `|E r_hat - E r|_L2 / |E r|_L2`
    pub mean_rel_err: f64,
    /// `|sd r_hat - sd r|_L2 / |E r|_L2`
    pub std_rel_err: f64,
}

pub const STATS_HEADER: &str = "x,mean,exact_mean,var,exact_var";

impl StatsReport {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{STATS_HEADER}")?;
        for i in 0..self.x.len() {
            writeln!(out, "{:?},{:?},{:?},{:?},{:?}", self.x[i], self.mean[i], self.exact_mean[i], self.var[i], self.exact_var[i])?;
        }
        Ok(())
    }
}

fn basis_rows(n: usize, grid: &[f64]) -> Vec<Vec<f64>> {
    grid.iter().map(|&x| (1..=n).map(|i| basis(i, x)).collect()).collect()
}

/// Statistics from a mean vector and covariance of `Y`.
pub fn stats_from_moments(mean: &[f64], cov: &Tensor, problem: &InverseProblem, grid: &[f64]) -> Result<StatsReport> {
    let n = problem.n();
    if grid.is_empty() {
        return Err(Error::Config("statistics grid is empty".into()));
    }
    if mean.len() != n || cov.shape() != [n, n] {
        return Err(Error::Shape(format!("moments must have dimension {n}")));
    }
    let e = basis_rows(n, grid);
    let quad = |v: &[f64]| -> f64 { (0..n).map(|i| (0..n).map(|j| v[i] * cov.get(i, j) * v[j]).sum::<f64>()).sum() };
    let m: Vec<f64> = e.iter().map(|r| r.iter().zip(mean).map(|(a, b)| a * b).sum()).collect();
    let var: Vec<f64> = e.iter().map(|r| quad(r).max(0.0)).collect();
    compare(grid, m, var, problem, &e)
}

fn compare(grid: &[f64], mean: Vec<f64>, var: Vec<f64>, problem: &InverseProblem, e: &[Vec<f64>]) -> Result<StatsReport> {
    let (mu, cov) = problem.true_posterior()?;
    let n = problem.n();
    let exact_mean: Vec<f64> = e.iter().map(|r| r.iter().zip(&mu).map(|(a, b)| a * b).sum()).collect();
    let exact_var: Vec<f64> = e
        .iter()
        .map(|r| (0..n).map(|i| (0..n).map(|j| r[i] * cov.get(i, j) * r[j]).sum::<f64>()).sum::<f64>().max(0.0))
        .collect();
    let scale = l2_norm(grid, &exact_mean);
    if !(scale > 0.0) {
        return Err(Error::Numerical("exact mean of r vanishes on the grid".into()));
    }
    let dm: Vec<f64> = mean.iter().zip(&exact_mean).map(|(a, b)| a - b).collect();
    let ds: Vec<f64> = var.iter().zip(&exact_var).map(|(a, b)| a.sqrt() - b.sqrt()).collect();
    Ok(StatsReport {
        x: grid.to_vec(),
        mean_rel_err: l2_norm(grid, &dm) / scale,
        std_rel_err: l2_norm(grid, &ds) / scale,
        mean,
        var,
        exact_mean,
        exact_var,
    })
}

/// Sample statistics of `r(x; Y)` on the grid for sample rows of `Y`.
pub fn stats_r(samples: &Tensor, problem: &InverseProblem, grid: &[f64]) -> Result<StatsReport> {
    let n = problem.n();
    if grid.is_empty() {
        return Err(Error::Config("statistics grid is empty".into()));
    }
    if samples.rows() < 2 || samples.cols() != n {
        return Err(Error::Shape(format!("need at least two samples of dimension {n}, got {:?}", samples.shape())));
    }
    let e = basis_rows(n, grid);
    let et = Tensor::from_rows(&e)?.transpose();
    let r = samples.matmul(&et);
    let count = samples.rows() as f64;
    let mut mean = vec![0.0; grid.len()];
    let mut var = vec![0.0; grid.len()];
    for (g, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
        let col = (0..samples.rows()).map(|s| r.get(s, g));
        *m = col.clone().sum::<f64>() / count;
        *v = col.map(|x| (x - *m).powi(2)).sum::<f64>() / (count - 1.0);
    }
    compare(grid, mean, var, problem, &e)
}

/// Draws from `N(mean, cov)` through a Cholesky factor.
pub fn sample_gaussian(mean: &[f64], cov: &Tensor, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let n = mean.len();
    let c = DMatrix::from_row_slice(n, n, cov.data());
    let l = c.cholesky().ok_or_else(|| Error::Singular("covariance".into()))?.l();
    let z = gauss_sample(rng, count, n);
    let lt = Tensor::new(&[n, n], (0..n * n).map(|i| l[(i % n, i / n)]).collect())?;
    let mut y = z.matmul(&lt);
    for s in 0..count {
        for j in 0..n {
            y.set(s, j, y.get(s, j) + mean[j]);
        }
    }
    Ok(y)
}
