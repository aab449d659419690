//! Fitting density models to a target known up to a constant.
//!
//! A flow `q` (KRnet or mean-field) is fitted by minimizing
//! `E_z[log q(f^-1 z) - log p_hat(f^-1 z)]`, which is bounded below by
//! `-log C` with `C` the normalizing constant of `p_hat`.
//!
//! A VAE-KRnet is fitted through joint draws `x = f_pr^-1(xi)`,
//! `y = mu_de(x) + sigma_de(x) eta`. Per draw, with
//! `fit = log p(y|x) + log p_X(x) - log p_hat(y)`, `prior = log p_X(x)` and
//! `cond = log q(x|y)`, the loss is `(lambda - 1) fit + prior - lambda cond`
//! for finite `lambda > 1` and `fit - cond` for `lambda = inf`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow_layers::ScaleBias;
use crate::krnet::KRnetModel;
use crate::numerics::{gauss_sample, seeded_rng, std_normal_logpdf, Adam, Graph, Param, Parameterized, Tensor, Var, HALF_LN_2PI};
use crate::vae_krnet::{mean_and_se, VaeKrnetModel, EVAL_CHUNK};

/// Unnormalized log density `log p_hat(y)` of a target distribution.
pub trait TargetDensity {
    fn dim(&self) -> usize;

    /// One value per row of `y`; `-inf` marks points outside the support.
    fn log_density(&self, g: &Graph, y: &Var) -> Result<Var>;

    /// `log C = log of the integral of p_hat`, when known.
    fn log_norm_const(&self) -> Option<f64> {
        None
    }
}

/// `c * N(mean, diag(std^2))` with `log_scale = log c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub log_scale: f64,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Shape("mean and std must be non-empty and of equal length".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("target standard deviations must be positive".into()));
        }
        Ok(Self { mean, std, log_scale: 0.0 })
    }

    pub fn standard(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n], log_scale: 0.0 }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.log_scale += c.ln();
        self
    }
}

impl TargetDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, g: &Graph, y: &Var) -> Result<Var> {
        check_width(y, self.dim())?;
        let mu = g.constant(Tensor::vector(self.mean.clone()));
        let inv = g.constant(Tensor::vector(self.std.iter().map(|s| 1.0 / s).collect()));
        let log_std: f64 = self.std.iter().map(|s| s.ln()).sum();
        let z = y.sub(&mu).mul(&inv);
        let c = self.log_scale - log_std - self.dim() as f64 * HALF_LN_2PI;
        Ok(z.square().sum_cols().scale(-0.5).add_scalar(c))
    }

    fn log_norm_const(&self) -> Option<f64> {
        Some(self.log_scale)
    }
}

/// `c * p_hat` for an inner target `p_hat`.
#[derive(Debug, Clone)]
pub struct ScaledTarget<T> {
    pub inner: T,
    pub log_c: f64,
}

impl<T: TargetDensity> ScaledTarget<T> {
    pub fn new(inner: T, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("scale factor must be positive and finite, got {c}")));
        }
        Ok(Self { inner, log_c: c.ln() })
    }
}

impl<T: TargetDensity> TargetDensity for ScaledTarget<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, g: &Graph, y: &Var) -> Result<Var> {
        Ok(self.inner.log_density(g, y)?.add_scalar(self.log_c))
    }

    fn log_norm_const(&self) -> Option<f64> {
        self.inner.log_norm_const().map(|l| l + self.log_c)
    }
}

fn check_width(y: &Var, n: usize) -> Result<()> {
    if y.shape().len() != 2 || y.cols() != n {
        return Err(Error::Shape(format!("target of dimension {n} got batch {:?}", y.shape())));
    }
    Ok(())
}

/// Weight of the fit term. Finite values must exceed one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Infinite,
    Finite(f64),
}

impl Lambda {
    pub fn finite(v: f64) -> Result<Self> {
        if v.is_infinite() && v > 0.0 {
            return Ok(Self::Infinite);
        }
        if !(v > 1.0) {
            return Err(Error::IllPosed(format!(
                "lambda = {v}: the target drops out of the loss for lambda <= 1 and the minimum is -inf"
            )));
        }
        Ok(Self::Finite(v))
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Infinite => write!(f, "inf"),
            Self::Finite(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "Inf" | "∞" => Ok(Self::Infinite),
            t => {
                let v: f64 = t.parse().map_err(|_| Error::Config(format!("lambda must be a number or `inf`, got `{t}`")))?;
                Self::finite(v)
            }
        }
    }
}

/// Independent Gaussian per coordinate, `y = mean + exp(log_std) * z`.
#[derive(Debug, Clone)]
pub struct MeanFieldModel {
    mean: Param,
    log_std: Param,
}

impl MeanFieldModel {
    /// Standard normal initialization.
    pub fn new(n: usize) -> Self {
        Self { mean: Param::new(Tensor::zeros(&[n])), log_std: Param::new(Tensor::zeros(&[n])) }
    }

    pub fn from_moments(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape("mean and std lengths differ".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("standard deviations must be positive".into()));
        }
        Ok(Self {
            mean: Param::new(Tensor::vector(mean)),
            log_std: Param::new(Tensor::vector(std.iter().map(|s| s.ln()).collect())),
        })
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.value.data()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.value.data().iter().map(|l| l.exp()).collect()
    }

    /// The same density as a scale-bias layer `z = a y + b`.
    pub fn to_scale_bias(&self) -> ScaleBias {
        let a: Vec<f64> = self.std().iter().map(|s| 1.0 / s).collect();
        let b = self.mean().iter().zip(&a).map(|(m, a)| -m * a).collect();
        ScaleBias::from_params(a, b).expect("matching lengths")
    }
}

impl Parameterized for MeanFieldModel {
    fn params(&self) -> Vec<&Param> {
        vec![&self.mean, &self.log_std]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.mean, &mut self.log_std]
    }
}

/// A density model that pushes standard normal noise to samples.
pub trait VariationalFlow: Parameterized {
    fn dim(&self) -> usize;

    /// Samples `y` for noise rows `z`, with `log q(y)` per row.
    fn transport(&self, g: &Graph, z: &Var) -> Result<(Var, Var)>;

    fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor>
    where
        Self: Sized,
    {
        let g = Graph::no_grad();
        let z = gauss_sample(rng, count, self.dim());
        Ok(self.transport(&g, &g.constant(z))?.0.value().clone())
    }
}

impl VariationalFlow for KRnetModel {
    fn dim(&self) -> usize {
        KRnetModel::dim(self)
    }

    fn transport(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        let (y, ld_inv) = self.inverse(g, z)?;
        Ok((y, std_normal_logpdf(z).sub(&ld_inv)))
    }
}

impl VariationalFlow for MeanFieldModel {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn transport(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        let ls = g.param(&self.log_std);
        let y = z.mul(&ls.exp()).add(&g.param(&self.mean));
        let log_q = std_normal_logpdf(z).sub(&ls.sum());
        Ok((y, log_q))
    }
}

/// Evaluates the target and reports the first point outside its support.
fn target_values(target: &dyn TargetDensity, g: &Graph, y: &Var) -> Result<Var> {
    let lp = target.log_density(g, y)?;
    for (i, v) in lp.data().iter().enumerate() {
        if *v == f64::NEG_INFINITY {
            return Err(Error::OutsideSupport { point: y.value().row(i).to_vec() });
        }
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("target log-density {v} at row {i}")));
        }
    }
    Ok(lp)
}

/// Per-draw `log q(y) - log p_hat(y)` with `y` pushed from the noise rows `z`.
pub fn krnet_vb_loss_values<M: VariationalFlow + ?Sized>(
    model: &M,
    target: &dyn TargetDensity,
    g: &Graph,
    z: &Tensor,
) -> Result<Var> {
    if target.dim() != model.dim() || z.cols() != model.dim() {
        return Err(Error::Shape(format!("model {}, target {}, noise {:?}", model.dim(), target.dim(), z.shape())));
    }
    let (y, log_q) = model.transport(g, &g.constant(z.clone()))?;
    let v = log_q.sub(&target_values(target, g, &y)?);
    if !v.value().all_finite() {
        return Err(Error::NonFinite("variational loss".into()));
    }
    Ok(v)
}

/// Minibatch estimate of the shifted KL divergence from `m` fresh draws.
pub fn krnet_vb_loss<M: VariationalFlow + ?Sized>(
    model: &M,
    target: &dyn TargetDensity,
    g: &Graph,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    if m == 0 {
        return Err(Error::Config("minibatch size must be positive".into()));
    }
    let z = gauss_sample(rng, m, model.dim());
    Ok(krnet_vb_loss_values(model, target, g, &z)?.mean())
}

/// The per-draw summands of the VAE-KRnet loss.
pub struct VbTerms {
    /// `log p(y|x) + log p_X(x) - log p_hat(y)`
    pub fit: Var,
    /// `log p_X(x)`
    pub prior: Var,
    /// `log q(x|y)`
    pub cond: Var,
}

impl VbTerms {
    /// Per-draw loss for the given weight.
    pub fn loss(&self, lambda: Lambda) -> Var {
        match lambda {
            Lambda::Infinite => self.fit.sub(&self.cond),
            Lambda::Finite(l) => self.fit.scale(l - 1.0).add(&self.prior).sub(&self.cond.scale(l)),
        }
    }
}

/// Noise width of one joint draw: latent plus data.
pub fn vae_noise_dim(model: &VaeKrnetModel) -> usize {
    model.latent_dim() + model.data_dim()
}

/// Loss summands for joint draws; `noise` rows hold `(xi, eta)`.
pub fn vae_krnet_vb_terms(model: &VaeKrnetModel, target: &dyn TargetDensity, g: &Graph, noise: &Tensor) -> Result<VbTerms> {
    let (d, n) = (model.latent_dim(), model.data_dim());
    if target.dim() != n || noise.cols() != d + n {
        return Err(Error::Shape(format!("model ({d}, {n}), target {}, noise {:?}", target.dim(), noise.shape())));
    }
    let xi = g.constant(noise.slice_cols(0, d));
    let eta = g.constant(noise.slice_cols(d, d + n));
    let (x, prior) = match &model.prior_flow {
        None => (xi.clone(), std_normal_logpdf(&xi)),
        Some(f) => {
            let (x, ld_inv) = f.inverse(g, &xi)?;
            (x, std_normal_logpdf(&xi).sub(&ld_inv))
        }
    };
    let (mu, log_std) = model.decoder.forward(g, &x)?;
    let y = mu.add(&eta.mul(&log_std.exp()));
    let log_lik = std_normal_logpdf(&eta).sub(&log_std.sum_cols());
    let fit = log_lik.add(&prior).sub(&target_values(target, g, &y)?);
    let cond = model.encoder_cond_log_pdf_batch(g, &x, &y)?;
    if !fit.value().all_finite() || !prior.value().all_finite() {
        return Err(Error::NonFinite("variational loss terms".into()));
    }
    Ok(VbTerms { fit, prior, cond })
}

/// Minibatch estimate of the VAE-KRnet loss from `m` fresh joint draws.
pub fn vae_krnet_vb_loss(
    model: &VaeKrnetModel,
    target: &dyn TargetDensity,
    lambda: Lambda,
    g: &Graph,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    if m == 0 {
        return Err(Error::Config("minibatch size must be positive".into()));
    }
    let noise = gauss_sample(rng, m, vae_noise_dim(model));
    Ok(vae_krnet_vb_terms(model, target, g, &noise)?.loss(lambda).mean())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Minibatch size `M`.
    pub batch: usize,
    /// Fixed validation draws.
    pub val_size: usize,
    /// Iterations per validation window.
    pub val_every: usize,
    pub lr: f64,
    /// When set, the learning rate stays at `lr` for the first half of the
    /// run and then decays geometrically to this value.
    pub lr_final: Option<f64>,
    pub seed: u64,
    pub lambda: Lambda,
    /// Consecutive non-finite steps that abort training.
    pub abort_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch: 64,
            val_size: 200_000,
            val_every: 1000,
            lr: 1e-3,
            lr_final: None,
            seed: 0,
            lambda: Lambda::Infinite,
            abort_after: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.val_size == 0 || self.val_every == 0 || self.abort_after == 0 {
            return Err(Error::Config("batch, validation size, cadence and abort streak must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0 && f <= self.lr) {
                return Err(Error::Config(format!("final learning rate {f} must lie in (0, {}]", self.lr)));
            }
        }
        if let Lambda::Finite(l) = self.lambda {
            Lambda::finite(l)?;
        }
        Ok(())
    }

    /// Learning rate used at iteration `it` (1-based).
    pub fn lr_at(&self, it: usize) -> f64 {
        let Some(last) = self.lr_final else { return self.lr };
        let start = self.iterations / 2;
        if it <= start || self.iterations == start {
            return self.lr;
        }
        let frac = (it - start) as f64 / (self.iterations - start) as f64;
        self.lr * (last / self.lr).powf(frac)
    }
}

/// One validation window of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Smallest minibatch loss inside the window.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Standard error of the validation loss.
    pub val_se: f64,
    pub lambda: Lambda,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Snapshot with the smallest validation loss (the initial model counts).
    pub best: M,
    pub best_val: f64,
    pub best_val_se: f64,
    pub best_iter: usize,
    pub trace: Vec<TraceRow>,
    pub skipped_steps: usize,
}

/// Validation noise of a run: fixed for a seed, independent of training draws.
pub fn validation_noise(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = seeded_rng(seed ^ 0x7a11_da7e_5eed_0001);
    gauss_sample(&mut rng, rows, cols)
}

/// Per-draw objective values on fixed noise, without recording, in chunks.
pub fn evaluate_values<M>(model: &M, noise: &Tensor, objective: &dyn Fn(&M, &Graph, &Tensor) -> Result<Var>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(noise.rows());
    for start in (0..noise.rows()).step_by(EVAL_CHUNK) {
        let g = Graph::no_grad();
        let chunk = noise.slice_rows(start, (start + EVAL_CHUNK).min(noise.rows()));
        out.extend_from_slice(objective(model, &g, &chunk)?.data());
    }
    Ok(out)
}

/// Adam on fresh standard normal noise. `objective` maps noise rows to
/// per-draw losses; the minibatch loss is their mean.
pub fn train_with<M, F>(model: M, noise_dim: usize, objective: F, cfg: &TrainConfig) -> Result<TrainOutcome<M>>
where
    M: Parameterized + Clone,
    F: Fn(&M, &Graph, &Tensor) -> Result<Var>,
{
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let val_noise = validation_noise(cfg.seed, cfg.val_size, noise_dim);
    let validate = |m: &M| -> Result<(f64, f64)> { Ok(mean_and_se(&evaluate_values(m, &val_noise, &objective)?)) };

    let mut model = model;
    let (mut best_val, mut best_val_se) = validate(&model)?;
    let mut best = model.clone();
    let mut best_iter = 0;
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::new();
    let mut skipped = 0;
    let mut streak = 0;
    let mut window_min = f64::INFINITY;
    for it in 1..=cfg.iterations {
        opt.lr = cfg.lr_at(it);
        let z = gauss_sample(&mut rng, cfg.batch, noise_dim);
        let g = Graph::new();
        let step = objective(&model, &g, &z).and_then(|v| {
            let loss = v.mean();
            let grads = g.backward(&loss)?;
            if !grads.all_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            Ok((loss.item(), grads))
        });
        match step {
            Ok((loss, grads)) => {
                opt.step(&mut model, &grads)?;
                window_min = window_min.min(loss);
                streak = 0;
            }
            Err(e) => {
                skipped += 1;
                streak += 1;
                if streak >= cfg.abort_after {
                    return Err(Error::TrainingAborted(format!("{streak} consecutive failed steps at iteration {it}; last: {e}")));
                }
            }
        }
        if it % cfg.val_every == 0 || it == cfg.iterations {
            let (val, se) = validate(&model)?;
            if val < best_val {
                best_val = val;
                best_val_se = se;
                best = model.clone();
                best_iter = it;
            }
            trace.push(TraceRow { iter: it, train_loss: window_min, val_loss: val, val_se: se, lambda: cfg.lambda, seed: cfg.seed });
            window_min = f64::INFINITY;
        }
    }
    Ok(TrainOutcome { best, best_val, best_val_se, best_iter, trace, skipped_steps: skipped })
}

/// Fits a flow (KRnet or mean-field) to the target.
pub fn train_flow<M>(model: M, target: &dyn TargetDensity, cfg: &TrainConfig) -> Result<TrainOutcome<M>>
where
    M: VariationalFlow + Clone,
{
    let dim = model.dim();
    train_with(model, dim, |m: &M, g: &Graph, z: &Tensor| krnet_vb_loss_values(m, target, g, z), cfg)
}

/// Fits a VAE-KRnet to the target with `cfg.lambda`.
pub fn train_vae_krnet(model: VaeKrnetModel, target: &dyn TargetDensity, cfg: &TrainConfig) -> Result<TrainOutcome<VaeKrnetModel>> {
    let dim = vae_noise_dim(&model);
    let lambda = cfg.lambda;
    train_with(
        model,
        dim,
        move |m: &VaeKrnetModel, g: &Graph, z: &Tensor| Ok(vae_krnet_vb_terms(m, target, g, z)?.loss(lambda)),
        cfg,
    )
}

#[derive(Debug, Clone)]
pub struct TwoStage {
    /// Trained with `lambda = inf`; used for the mean.
    pub mean_model: TrainOutcome<VaeKrnetModel>,
    /// Continued with the finite `lambda`; used for the variance.
    pub variance_model: TrainOutcome<VaeKrnetModel>,
}

/// Stage one minimizes the `lambda = inf` loss for `first.iterations`; stage
/// two continues from its best snapshot with the finite `lambda`.
pub fn train_two_stage(
    model: VaeKrnetModel,
    target: &dyn TargetDensity,
    first: &TrainConfig,
    second_iterations: usize,
    lambda: f64,
) -> Result<TwoStage> {
    let lambda = match Lambda::finite(lambda)? {
        Lambda::Infinite => return Err(Error::Config("second stage needs a finite lambda".into())),
        l => l,
    };
    let stage1 = train_vae_krnet(model, target, &TrainConfig { lambda: Lambda::Infinite, ..first.clone() })?;
    let second = TrainConfig { iterations: second_iterations, lambda, seed: first.seed.wrapping_add(1), ..first.clone() };
    let stage2 = continue_with(&stage1, target, &second)?;
    Ok(TwoStage { mean_model: stage1, variance_model: stage2 })
}

/// Continues training from the best snapshot of an earlier run.
pub fn continue_with(
    earlier: &TrainOutcome<VaeKrnetModel>,
    target: &dyn TargetDensity,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<VaeKrnetModel>> {
    train_vae_krnet(earlier.best.clone(), target, cfg)
}

/// Header of the loss-trace CSV.
pub const TRACE_HEADER: &str = "iter,train_loss,val_loss,lambda,seed";

/// Writes trace rows as CSV with [`TRACE_HEADER`].
pub fn write_trace_csv(out: &mut impl Write, rows: &[TraceRow]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:?},{:?},{},{}", r.iter, r.train_loss, r.val_loss, r.lambda, r.seed)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_parsing_and_bounds() {
        assert!(matches!(Lambda::finite(1.0), Err(Error::IllPosed(_))));
        assert!(matches!(Lambda::finite(0.5), Err(Error::IllPosed(_))));
        assert!(Lambda::finite(f64::NAN).is_err());
        assert_eq!(Lambda::finite(2.0).unwrap(), Lambda::Finite(2.0));
        assert_eq!("inf".parse::<Lambda>().unwrap(), Lambda::Infinite);
        assert_eq!("2.5".parse::<Lambda>().unwrap(), Lambda::Finite(2.5));
        assert!("1".parse::<Lambda>().is_err());
        assert!("x".parse::<Lambda>().is_err());
        assert_eq!(Lambda::Finite(2.5).to_string(), "2.5");
    }

    #[test]
    fn own_density_gives_zero_loss() {
        let m = MeanFieldModel::from_moments(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let t = GaussianTarget::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let mut rng = seeded_rng(3);
        let g = Graph::no_grad();
        let v = krnet_vb_loss_values(&m, &t, &g, &gauss_sample(&mut rng, 100, 2)).unwrap();
        assert!(v.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn scaled_target_shifts_loss_by_log_c() {
        let m = MeanFieldModel::new(3);
        let t = GaussianTarget::standard(3).scaled(2.0);
        let mut rng = seeded_rng(4);
        let loss = krnet_vb_loss(&m, &t, &Graph::no_grad(), 50, &mut rng).unwrap().item();
        assert!((loss + 2f64.ln()).abs() < 1e-12);
        assert_eq!(t.log_norm_const(), Some(2f64.ln()));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow { iter: 1000, train_loss: 1.5, val_loss: 2.0, val_se: 0.1, lambda: Lambda::Infinite, seed: 7 }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,train_loss,val_loss,lambda,seed\n1000,1.5,2.0,inf,7\n");
    }
}
