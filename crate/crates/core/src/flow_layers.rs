//! Invertible layers acting on the active prefix of a batch.
//!
//! Every layer maps a batch `[M, k]` to `[M, k]` and reports the per-row
//! log-determinant of its Jacobian. Vector helpers (`apply`, `invert`)
//! accept longer inputs and pass the inactive tail through untouched.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, MlpNet, Param, Parameterized, Tensor, Var};
use crate::numerics::pwq::Kind as PwqKind;

/// Splits a vector into an active prefix of `k` entries and a frozen tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqueezeMask {
    n: usize,
    k: usize,
}

impl SqueezeMask {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::Config(format!("active count {k} must lie in 1..={n}")));
        }
        Ok(Self { n, k })
    }

    pub fn total(&self) -> usize {
        self.n
    }

    pub fn active(&self) -> usize {
        self.k
    }

    pub fn split(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if y.len() != self.n {
            return Err(Error::Shape(format!("squeeze expects {} values, got {}", self.n, y.len())));
        }
        Ok((y[..self.k].to_vec(), y[self.k..].to_vec()))
    }

    pub fn join(&self, active: &[f64], frozen: &[f64]) -> Result<Vec<f64>> {
        if active.len() != self.k || frozen.len() != self.n - self.k {
            return Err(Error::Shape("squeeze join length mismatch".into()));
        }
        Ok([active, frozen].concat())
    }

    /// Batch form of [`split`](Self::split).
    pub fn split_batch(&self, y: &Var) -> Result<(Var, Var)> {
        if y.cols() != self.n {
            return Err(Error::Shape(format!("squeeze expects {} columns, got {}", self.n, y.cols())));
        }
        Ok((y.slice_cols(0, self.k), y.slice_cols(self.k, self.n)))
    }
}

/// `z = (L U) y` with unit lower-triangular `L` and upper-triangular `U`.
///
/// Both factors are stored as full `k x k` matrices and masked on use, so the
/// entries outside the triangles are inert.
#[derive(Debug, Clone)]
pub struct RotationLU {
    k: usize,
    l: Param,
    u: Param,
}

impl RotationLU {
    pub fn identity(k: usize) -> Self {
        Self { k, l: Param::new(Tensor::zeros(&[k, k])), u: Param::new(Tensor::identity(k)) }
    }

    /// Builds from explicit factors; entries outside the triangles are ignored.
    pub fn from_lu(l: Tensor, u: Tensor) -> Result<Self> {
        let k = l.rows();
        if l.shape() != [k, k] || u.shape() != [k, k] {
            return Err(Error::Shape("rotation factors must be square and equal-sized".into()));
        }
        Ok(Self { k, l: Param::new(l), u: Param::new(u) })
    }

    pub fn width(&self) -> usize {
        self.k
    }

    fn masks(&self) -> (Tensor, Tensor) {
        let k = self.k;
        let mut lower = Tensor::zeros(&[k, k]);
        let mut upper = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in 0..k {
                if j < i {
                    lower.set(i, j, 1.0);
                } else {
                    upper.set(i, j, 1.0);
                }
            }
        }
        (lower, upper)
    }

    fn check_diag(&self) -> Result<()> {
        for i in 0..self.k {
            if self.u.value.get(i, i).abs() < 1e-12 {
                return Err(Error::Singular(format!("rotation U[{i},{i}] vanishes")));
            }
        }
        Ok(())
    }

    /// `W = L U` after masking, and the diagonal of `U` as `[k]`.
    fn factors(&self, g: &Graph) -> (Var, Var) {
        let (lower, upper) = self.masks();
        let l = g.param(&self.l).mul(&g.constant(lower)).add(&g.constant(Tensor::identity(self.k)));
        let u = g.param(&self.u).mul(&g.constant(upper));
        let diag = u.mul(&g.constant(Tensor::identity(self.k))).sum_cols();
        (l.matmul(&u), diag)
    }

    /// Reconstructed `W = L U`.
    pub fn matrix(&self) -> Tensor {
        self.factors(&Graph::no_grad()).0.value().clone()
    }

    pub fn forward(&self, g: &Graph, y: &Var) -> Result<(Var, Var)> {
        check_width(y, self.k, "rotation")?;
        self.check_diag()?;
        let (w, diag) = self.factors(g);
        let z = y.matmul(&w.transpose());
        let ld = diag.abs().ln().sum();
        Ok((z, per_row(g, &ld, y.rows())))
    }

    pub fn inverse(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        check_width(z, self.k, "rotation")?;
        self.check_diag()?;
        let (w, diag) = self.factors(g);
        let y = z.matmul(&w.inverse()?.transpose());
        let ld = diag.abs().ln().sum().neg();
        Ok((y, per_row(g, &ld, z.rows())))
    }
}

/// `z = a * y + b` per active dimension.
#[derive(Debug, Clone)]
pub struct ScaleBias {
    a: Param,
    b: Param,
    initialized: bool,
}

impl ScaleBias {
    /// Identity parameters, waiting for data-dependent initialization.
    pub fn new(k: usize) -> Self {
        Self { a: Param::new(Tensor::ones(&[k])), b: Param::new(Tensor::zeros(&[k])), initialized: false }
    }

    pub fn from_params(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape("scale and bias lengths differ".into()));
        }
        Ok(Self { a: Param::new(Tensor::vector(a)), b: Param::new(Tensor::vector(b)), initialized: true })
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Accepts the current (identity) parameters as the initialization.
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub(crate) fn set_initialized(&mut self, flag: bool) {
        self.initialized = flag;
    }

    pub fn scale(&self) -> &[f64] {
        self.a.value.data()
    }

    pub fn bias(&self) -> &[f64] {
        self.b.value.data()
    }

    /// Sets `a = 1/std`, `b = -mean/std` from the columns of `batch`
    /// (population moments), so the batch leaves standardized.
    pub fn init_from_data(&mut self, batch: &Tensor) -> Result<()> {
        let (n, k) = (batch.rows(), batch.cols());
        if k != self.width() {
            return Err(Error::Shape(format!("scale-bias width {} vs batch width {k}", self.width())));
        }
        if n < 2 {
            return Err(Error::Config("scale-bias initialization needs at least two samples".into()));
        }
        let mut a = vec![0.0; k];
        let mut b = vec![0.0; k];
        for j in 0..k {
            let mean = (0..n).map(|i| batch.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (batch.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if !(std > 1e-12) {
                return Err(Error::Numerical(format!("dimension {j} has zero spread; cannot standardize")));
            }
            a[j] = 1.0 / std;
            b[j] = -mean / std;
        }
        self.a.value = Tensor::vector(a);
        self.b.value = Tensor::vector(b);
        self.initialized = true;
        Ok(())
    }

    fn ready(&self) -> Result<()> {
        if !self.initialized {
            return Err(Error::Uninitialized("scale-bias layer has not seen data".into()));
        }
        if self.a.value.data().iter().any(|&x| x == 0.0) {
            return Err(Error::Singular("scale-bias has a zero scale".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &Graph, y: &Var) -> Result<(Var, Var)> {
        check_width(y, self.width(), "scale-bias")?;
        self.ready()?;
        let a = g.param(&self.a);
        let z = y.mul(&a).add(&g.param(&self.b));
        let ld = a.abs().ln().sum();
        Ok((z, per_row(g, &ld, y.rows())))
    }

    pub fn inverse(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        check_width(z, self.width(), "scale-bias")?;
        self.ready()?;
        let a = g.param(&self.a);
        let y = z.sub(&g.param(&self.b)).div(&a);
        let ld = a.abs().ln().sum().neg();
        Ok((y, per_row(g, &ld, z.rows())))
    }
}

/// Scale factor bound in the coupling update.
pub const COUPLING_ALPHA: f64 = 0.6;

/// Affine coupling on halves of the active block.
///
/// Part A is the first `ceil(k/2)` columns, part B the rest. Parity 0 keeps
/// A and updates B; parity 1 keeps B and updates A. The updated part becomes
/// `y (1 + alpha tanh s) + exp(beta) tanh t` with `(s, t)` produced by a tanh
/// network of the kept part. With an empty kept part the network sees a
/// constant input of one.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    k: usize,
    parity: u8,
    alpha: f64,
    net: Option<MlpNet>,
    beta: Param,
}

impl AffineCoupling {
    /// Network with two hidden layers of width `hidden` and a zeroed head.
    pub fn new(k: usize, parity: u8, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_depth(k, parity, &[hidden, hidden], rng)
    }

    pub fn with_depth(k: usize, parity: u8, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || parity > 1 {
            return Err(Error::Config(format!("coupling needs k >= 1 and parity 0/1, got k={k}, parity={parity}")));
        }
        let mut layer = Self { k, parity, alpha: COUPLING_ALPHA, net: None, beta: Param::new(Tensor::zeros(&[0])) };
        let (cond, upd) = layer.split_sizes();
        if upd > 0 {
            let mut widths = vec![cond.max(1)];
            widths.extend_from_slice(hidden);
            widths.push(2 * upd);
            let mut net = MlpNet::new(&widths, rng)?;
            net.zero_output_head();
            layer.net = Some(net);
        }
        layer.beta = Param::new(Tensor::zeros(&[upd]));
        Ok(layer)
    }

    pub fn width(&self) -> usize {
        self.k
    }

    pub fn parity(&self) -> u8 {
        self.parity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn net_mut(&mut self) -> Option<&mut MlpNet> {
        self.net.as_mut()
    }

    pub fn beta_mut(&mut self) -> &mut Param {
        &mut self.beta
    }

    fn part_a(&self) -> usize {
        self.k.div_ceil(2)
    }

    /// (kept, updated) column counts.
    pub fn split_sizes(&self) -> (usize, usize) {
        let m = self.part_a();
        if self.parity == 0 {
            (m, self.k - m)
        } else {
            (self.k - m, m)
        }
    }

    /// (kept, updated) column views of a batch.
    fn parts(&self, y: &Var) -> (Var, Var) {
        let m = self.part_a();
        let a = y.slice_cols(0, m);
        let b = y.slice_cols(m, self.k);
        if self.parity == 0 {
            (a, b)
        } else {
            (b, a)
        }
    }

    fn join(&self, kept: &Var, updated: &Var) -> Var {
        if self.parity == 0 {
            Var::concat_cols(&[kept, updated])
        } else {
            Var::concat_cols(&[updated, kept])
        }
    }

    /// `(1 + alpha tanh s, exp(beta) tanh t)` for the kept part.
    fn scale_shift(&self, g: &Graph, kept: &Var) -> Result<(Var, Var)> {
        let net = self.net.as_ref().expect("caller checked for an updated part");
        let upd = self.beta.len();
        let input = if kept.cols() == 0 { g.constant(Tensor::ones(&[kept.rows(), 1])) } else { kept.clone() };
        let out = net.forward(g, &input)?;
        let s = out.slice_cols(0, upd);
        let t = out.slice_cols(upd, 2 * upd);
        let scale = s.tanh().scale(self.alpha).add_scalar(1.0);
        let shift = t.tanh().mul(&g.param(&self.beta).exp());
        Ok((scale, shift))
    }

    pub fn forward(&self, g: &Graph, y: &Var) -> Result<(Var, Var)> {
        check_width(y, self.k, "coupling")?;
        if self.net.is_none() {
            return Ok((y.clone(), zeros_row(g, y.rows())));
        }
        let (kept, upd) = self.parts(y);
        let (scale, shift) = self.scale_shift(g, &kept)?;
        let z = self.join(&kept, &upd.mul(&scale).add(&shift));
        Ok((z, scale.ln().sum_cols()))
    }

    pub fn inverse(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        check_width(z, self.k, "coupling")?;
        if self.net.is_none() {
            return Ok((z.clone(), zeros_row(g, z.rows())));
        }
        let (kept, upd) = self.parts(z);
        let (scale, shift) = self.scale_shift(g, &kept)?;
        let y = self.join(&kept, &upd.sub(&shift).div(&scale));
        Ok((y, scale.ln().sum_cols().neg()))
    }
}

/// Default support half-width of the nonlinear layer.
pub const NONLINEAR_CUTOFF: f64 = 50.0;
/// Default bin count of the nonlinear layer.
pub const NONLINEAR_BINS: usize = 32;
/// Density floor of the nonlinear layer.
pub const NONLINEAR_P_MIN: f64 = 1e-6;

/// Componentwise CDF map with a piecewise-linear density on `[-a, a]`.
///
/// Node values are `(1 - p_min) exp(theta) / Z + p_min` where `Z` is the
/// trapezoid integral of `exp(theta)`, so the density integrates to one and
/// never drops below `p_min`.
#[derive(Debug, Clone)]
pub struct NonlinearInvertible {
    k: usize,
    cutoff: f64,
    p_min: f64,
    theta: Param,
}

impl NonlinearInvertible {
    /// Uniform density (the identity map) with the default bin count.
    pub fn new(k: usize) -> Self {
        Self::with_bins(k, NONLINEAR_CUTOFF, NONLINEAR_BINS)
    }

    pub fn with_bins(k: usize, cutoff: f64, bins: usize) -> Self {
        Self { k, cutoff, p_min: NONLINEAR_P_MIN, theta: Param::new(Tensor::zeros(&[bins.max(1) + 1])) }
    }

    /// Layer whose density passes through the given node values.
    /// The values must be nonnegative with unit trapezoid integral.
    pub fn from_nodes(k: usize, cutoff: f64, nodes: &[f64]) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config("need at least two node values".into()));
        }
        if !(cutoff > 0.0 && cutoff.is_finite()) {
            return Err(Error::Config(format!("cutoff must be positive, got {cutoff}")));
        }
        if nodes.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("node values must be finite and nonnegative".into()));
        }
        let h = 1.0 / (nodes.len() - 1) as f64;
        let total = trapezoid(nodes, h);
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("node values integrate to {total}, not 1")));
        }
        let p_min = NONLINEAR_P_MIN;
        let theta = nodes.iter().map(|v| ((v - p_min) / (1.0 - p_min)).max(1e-300).ln()).collect();
        Ok(Self { k, cutoff, p_min, theta: Param::new(Tensor::vector(theta)) })
    }

    pub fn width(&self) -> usize {
        self.k
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn bins(&self) -> usize {
        self.theta.len() - 1
    }

    fn nodes(&self, g: &Graph) -> Var {
        let n = self.theta.len();
        let h = 1.0 / (n - 1) as f64;
        let mut w = vec![h; n];
        w[0] = h / 2.0;
        w[n - 1] = h / 2.0;
        let e = g.param(&self.theta).exp();
        let z = e.mul(&g.constant(Tensor::vector(w))).sum();
        e.div(&z).scale(1.0 - self.p_min).add_scalar(self.p_min)
    }

    /// Current node values of the density.
    pub fn node_values(&self) -> Vec<f64> {
        self.nodes(&Graph::no_grad()).data().to_vec()
    }

    pub fn forward(&self, g: &Graph, y: &Var) -> Result<(Var, Var)> {
        check_width(y, self.k, "nonlinear")?;
        let v = self.nodes(g);
        let z = y.pwq(&v, PwqKind::Forward, self.cutoff)?;
        let ld = y.pwq(&v, PwqKind::LogPdf, self.cutoff)?.sum_cols();
        Ok((z, ld))
    }

    pub fn inverse(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        check_width(z, self.k, "nonlinear")?;
        let v = self.nodes(g);
        let y = z.pwq(&v, PwqKind::Inverse, self.cutoff)?;
        let ld = y.pwq(&v, PwqKind::LogPdf, self.cutoff)?.sum_cols().neg();
        Ok((y, ld))
    }
}

fn trapezoid(v: &[f64], h: f64) -> f64 {
    let n = v.len();
    h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[n - 1]))
}

/// Any of the invertible layers.
#[derive(Debug, Clone)]
pub enum FlowLayer {
    Squeeze(SqueezeMask),
    Rotation(RotationLU),
    ScaleBias(ScaleBias),
    Coupling(AffineCoupling),
    Nonlinear(NonlinearInvertible),
}

impl FlowLayer {
    /// Number of leading columns the layer acts on.
    pub fn width(&self) -> usize {
        match self {
            FlowLayer::Squeeze(m) => m.total(),
            FlowLayer::Rotation(l) => l.width(),
            FlowLayer::ScaleBias(l) => l.width(),
            FlowLayer::Coupling(l) => l.width(),
            FlowLayer::Nonlinear(l) => l.width(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::Squeeze(_) => "squeeze",
            FlowLayer::Rotation(_) => "rotation",
            FlowLayer::ScaleBias(_) => "scale_bias",
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::Nonlinear(_) => "nonlinear",
        }
    }

    /// Batch forward on `[M, width]`: `(z, logdet[M])`.
    pub fn forward(&self, g: &Graph, y: &Var) -> Result<(Var, Var)> {
        match self {
            FlowLayer::Squeeze(m) => {
                check_width(y, m.total(), "squeeze")?;
                Ok((y.clone(), zeros_row(g, y.rows())))
            }
            FlowLayer::Rotation(l) => l.forward(g, y),
            FlowLayer::ScaleBias(l) => l.forward(g, y),
            FlowLayer::Coupling(l) => l.forward(g, y),
            FlowLayer::Nonlinear(l) => l.forward(g, y),
        }
    }

    /// Batch inverse: `(y, log|det d f^-1 / dz|[M])`.
    pub fn inverse(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        match self {
            FlowLayer::Squeeze(m) => {
                check_width(z, m.total(), "squeeze")?;
                Ok((z.clone(), zeros_row(g, z.rows())))
            }
            FlowLayer::Rotation(l) => l.inverse(g, z),
            FlowLayer::ScaleBias(l) => l.inverse(g, z),
            FlowLayer::Coupling(l) => l.inverse(g, z),
            FlowLayer::Nonlinear(l) => l.inverse(g, z),
        }
    }

    /// Forward on one vector; entries beyond the layer width pass through.
    pub fn apply(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.vector_op(y, true)
    }

    /// Inverse on one vector; entries beyond the layer width pass through.
    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.vector_op(z, false).map(|(y, _)| y)
    }

    fn vector_op(&self, x: &[f64], forward: bool) -> Result<(Vec<f64>, f64)> {
        let k = self.width();
        if x.len() < k {
            return Err(Error::Shape(format!("{} layer needs at least {k} values, got {}", self.kind(), x.len())));
        }
        let g = Graph::no_grad();
        let head = g.constant(Tensor::matrix(1, k, x[..k].to_vec())?);
        let (out, ld) = if forward { self.forward(&g, &head)? } else { self.inverse(&g, &head)? };
        let mut v = out.data().to_vec();
        v.extend_from_slice(&x[k..]);
        Ok((v, ld.data()[0]))
    }
}

impl Parameterized for RotationLU {
    fn params(&self) -> Vec<&Param> {
        vec![&self.l, &self.u]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.l, &mut self.u]
    }
}

impl Parameterized for ScaleBias {
    fn params(&self) -> Vec<&Param> {
        vec![&self.a, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.a, &mut self.b]
    }
}

impl Parameterized for AffineCoupling {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.net.as_ref().map(|n| n.params()).unwrap_or_default();
        p.push(&self.beta);
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.net.as_mut().map(|n| n.params_mut()).unwrap_or_default();
        p.push(&mut self.beta);
        p
    }
}

impl Parameterized for NonlinearInvertible {
    fn params(&self) -> Vec<&Param> {
        vec![&self.theta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.theta]
    }
}

impl Parameterized for FlowLayer {
    fn params(&self) -> Vec<&Param> {
        match self {
            FlowLayer::Squeeze(_) => Vec::new(),
            FlowLayer::Rotation(l) => l.params(),
            FlowLayer::ScaleBias(l) => l.params(),
            FlowLayer::Coupling(l) => l.params(),
            FlowLayer::Nonlinear(l) => l.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            FlowLayer::Squeeze(_) => Vec::new(),
            FlowLayer::Rotation(l) => l.params_mut(),
            FlowLayer::ScaleBias(l) => l.params_mut(),
            FlowLayer::Coupling(l) => l.params_mut(),
            FlowLayer::Nonlinear(l) => l.params_mut(),
        }
    }
}

fn check_width(y: &Var, k: usize, what: &str) -> Result<()> {
    if y.shape().len() != 2 || y.cols() != k {
        return Err(Error::Shape(format!("{what} layer expects [M, {k}], got {:?}", y.shape())));
    }
    Ok(())
}

/// Broadcasts a scalar log-determinant to every row.
fn per_row(g: &Graph, ld: &Var, rows: usize) -> Var {
    g.constant(Tensor::ones(&[rows])).mul(ld)
}

fn zeros_row(g: &Graph, rows: usize) -> Var {
    g.constant(Tensor::zeros(&[rows]))
}
