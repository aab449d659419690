#![allow(dead_code)]

use nalgebra::DMatrix;
use vaekrnet::krnet::{KRnetConfig, KRnetModel};
use vaekrnet::numerics::{gauss_sample, seeded_rng, Graph, Parameterized, SeededRng, Tensor, Var};
use vaekrnet::vae::GaussHead;
use vaekrnet::vae_krnet::VaeKrnetModel;
use vaekrnet::vb::TargetDensity;

/// Adds `scale * N(0, 1)` noise to every parameter entry.
pub fn jitter(model: &mut (impl Parameterized + ?Sized), rng: &mut SeededRng, scale: f64) {
    for p in model.params_mut() {
        let noise = gauss_sample(rng, 1, p.len());
        p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(w, n)| *w += scale * n);
    }
}

/// A KRnet with data-initialized scale-bias layers and randomized weights.
pub fn random_krnet(cfg: KRnetConfig, seed: u64, scale: f64) -> KRnetModel {
    let mut rng = seeded_rng(seed);
    let mut m = KRnetModel::new(cfg, &mut rng).unwrap();
    let n = m.dim();
    let data = gauss_sample(&mut rng, 256, n);
    let skewed = Tensor::new(&[256, n], data.data().iter().map(|x| 1.5 * x + 0.2 * x * x).collect()).unwrap();
    m.initialize_from_data(&skewed).unwrap();
    jitter(&mut m, &mut rng, scale);
    m
}

/// `ln |det J|` of `f` at `y` by central differences.
pub fn fd_log_det(f: impl Fn(&[f64]) -> Vec<f64>, y: &[f64], h: f64) -> f64 {
    let n = y.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut yp = y.to_vec();
        yp[j] += h;
        let mut ym = y.to_vec();
        ym[j] -= h;
        let (zp, zm) = (f(&yp), f(&ym));
        for i in 0..n {
            jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

/// Trapezoid integral of `exp(logf)` over `[-r, r]^2` on a `pts x pts` grid.
pub fn integrate_2d(logf: impl Fn(&Tensor) -> Vec<f64>, r: f64, pts: usize) -> f64 {
    let h = 2.0 * r / (pts - 1) as f64;
    let mut grid = Vec::with_capacity(pts * pts * 2);
    for i in 0..pts {
        for j in 0..pts {
            grid.push(-r + i as f64 * h);
            grid.push(-r + j as f64 * h);
        }
    }
    let vals = logf(&Tensor::matrix(pts * pts, 2, grid).unwrap());
    let w = |i: usize| if i == 0 || i == pts - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..pts {
        for j in 0..pts {
            total += w(i) * w(j) * vals[i * pts + j].exp();
        }
    }
    total * h * h
}

/// The linear model `Y = A X + sigma * xi` with `X ~ N(0, I)`, and its closed forms.
pub struct LinearOracle {
    pub a: DMatrix<f64>,
    pub sigma: f64,
    /// Posterior covariance `(I + A^T A / sigma^2)^-1`.
    pub post_cov: DMatrix<f64>,
    /// Posterior mean map: `mu = gain * y`.
    pub gain: DMatrix<f64>,
}

impl LinearOracle {
    pub fn new(a: DMatrix<f64>, sigma: f64) -> Self {
        let d = a.ncols();
        let prec = DMatrix::identity(d, d) + a.transpose() * &a / (sigma * sigma);
        let post_cov = prec.try_inverse().unwrap();
        let gain = &post_cov * a.transpose() / (sigma * sigma);
        Self { a, sigma, post_cov, gain }
    }

    /// `A` with orthonormal columns, so the posterior covariance is diagonal.
    pub fn orthonormal(n: usize, d: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let g = gauss_sample(&mut rng, n, d);
        let q = DMatrix::from_row_slice(n, d, g.data()).qr().q();
        Self::new(q.columns(0, d).into_owned(), sigma)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    pub fn marginal_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) * self.sigma.powi(2) + &self.a * self.a.transpose()
    }

    /// Decoder `mu = A x`, `sigma_de = sigma`.
    pub fn decoder(&self) -> GaussHead {
        // row-major A^T is column-major A
        let w = Tensor::new(&[self.d(), self.n()], self.a.as_slice().to_vec()).unwrap();
        GaussHead::affine(w, vec![0.0; self.n()], vec![self.sigma.ln(); self.n()]).unwrap()
    }

    /// Encoder reproducing the diagonal of the exact posterior.
    pub fn posterior_encoder(&self) -> GaussHead {
        let w = Tensor::new(&[self.n(), self.d()], self.gain.as_slice().to_vec()).unwrap();
        let ls = (0..self.d()).map(|i| 0.5 * self.post_cov[(i, i)].ln()).collect();
        GaussHead::affine(w, vec![0.0; self.d()], ls).unwrap()
    }

    /// `log N(y; 0, sigma^2 I + A A^T)`.
    pub fn log_evidence(&self, y: &[f64]) -> f64 {
        gauss_log_pdf(y, &self.marginal_cov())
    }

    pub fn model(&self, encoder: GaussHead) -> VaeKrnetModel {
        VaeKrnetModel::from_parts(encoder, self.decoder(), None, None).unwrap()
    }

    pub fn sample_y(&self, count: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let x = gauss_sample(&mut rng, count, self.d());
        let e = gauss_sample(&mut rng, count, self.n());
        let mut y = Tensor::zeros(&[count, self.n()]);
        for s in 0..count {
            for i in 0..self.n() {
                let m: f64 = (0..self.d()).map(|j| self.a[(i, j)] * x.get(s, j)).sum();
                y.set(s, i, m + self.sigma * e.get(s, i));
            }
        }
        y
    }
}

/// `log N(y; 0, cov)`.
pub fn gauss_log_pdf(y: &[f64], cov: &DMatrix<f64>) -> f64 {
    let n = y.len();
    let chol = cov.clone().cholesky().unwrap();
    let v = nalgebra::DVector::from_column_slice(y);
    let sol = chol.solve(&v);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + v.dot(&sol))
}

/// `c * N(0, cov)` as a target density.
pub struct FullGaussian {
    prec: Tensor,
    constant: f64,
    log_c: f64,
}

impl FullGaussian {
    pub fn new(cov: &DMatrix<f64>, c: f64) -> Self {
        let n = cov.nrows();
        let p = cov.clone().try_inverse().unwrap();
        let log_det = cov.determinant().ln();
        Self {
            prec: Tensor::new(&[n, n], p.transpose().as_slice().to_vec()).unwrap(),
            constant: c.ln() - 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
            log_c: c.ln(),
        }
    }
}

impl TargetDensity for FullGaussian {
    fn dim(&self) -> usize {
        self.prec.rows()
    }

    fn log_density(&self, g: &Graph, y: &Var) -> vaekrnet::Result<Var> {
        let p = g.constant(self.prec.clone());
        Ok(y.matmul(&p).mul(y).sum_cols().scale(-0.5).add_scalar(self.constant))
    }

    fn log_norm_const(&self) -> Option<f64> {
        Some(self.log_c)
    }
}

/// Two models trained jointly, for gradient checks.
pub struct Pair<A, B>(pub A, pub B);

impl<A: Parameterized, B: Parameterized> Parameterized for Pair<A, B> {
    fn params(&self) -> Vec<&vaekrnet::numerics::Param> {
        let mut v = self.0.params();
        v.extend(self.1.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut vaekrnet::numerics::Param> {
        let mut v = self.0.params_mut();
        v.extend(self.1.params_mut());
        v
    }
}
