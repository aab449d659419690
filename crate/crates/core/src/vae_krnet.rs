//! VAE-KRnet: a Gaussian VAE whose prior and encoder are generalized by
//! KRnet flows over the latent space.
//!
//! The prior is `p_X(x) = p_G(f_pr(x)) |det grad f_pr(x)|`. The encoder draws
//! `x = mu_en(y) + sigma_en(y) * f_en^-1(xi)` with `xi ~ N(0, I)`; its density
//! follows the full change of variables through `u = (x - mu_en) / sigma_en`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::krnet::{KRnetConfig, KRnetModel};
use crate::numerics::{
    gauss_sample, seeded_rng, std_normal_logpdf, Adam, Graph, Param, Parameterized, Tensor, Var,
};
use crate::vae::{as_batch, diag_gauss_log_pdf, GaussHead};

/// Rows evaluated per no-grad chunk in estimators and validation.
pub const EVAL_CHUNK: usize = 4096;

/// Shape of a KRnet over the latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentFlowSpec {
    /// Coupling layers per stage (`L_pr` or `L_en`).
    pub depth: usize,
    /// Coupling network width `N_L`.
    pub hidden: usize,
    /// Dimensions deactivated per stage.
    pub step: usize,
    /// Upper bound on the block count `K`; the flow uses `min(d, K)`.
    pub max_blocks: usize,
}

impl LatentFlowSpec {
    pub fn new(depth: usize, hidden: usize) -> Self {
        Self { depth, hidden, step: 1, max_blocks: usize::MAX }
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn with_max_blocks(mut self, k: usize) -> Self {
        self.max_blocks = k;
        self
    }

    pub fn config(&self, d: usize) -> Result<KRnetConfig> {
        KRnetConfig::stepped(d, self.step, self.max_blocks.min(d), self.depth, self.hidden)
    }

    /// Identity-initialized flow over `R^d`.
    pub fn build(&self, d: usize, rng: &mut impl Rng) -> Result<KRnetModel> {
        let mut flow = KRnetModel::new(self.config(d)?, rng)?;
        flow.mark_identity_initialized();
        Ok(flow)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeKrnetConfig {
    /// Data dimension `n`.
    pub n: usize,
    /// Latent dimension `d`.
    pub d: usize,
    /// Hidden layers `D` of encoder and decoder.
    pub depth: usize,
    /// Hidden width `N_D` of encoder and decoder.
    pub width: usize,
    pub prior_flow: Option<LatentFlowSpec>,
    pub encoder_flow: Option<LatentFlowSpec>,
}

impl VaeKrnetConfig {
    /// Canonical VAE: no latent flows.
    pub fn canonical(n: usize, d: usize, depth: usize, width: usize) -> Self {
        Self { n, d, depth, width, prior_flow: None, encoder_flow: None }
    }

    pub fn with_prior_flow(mut self, spec: LatentFlowSpec) -> Self {
        self.prior_flow = Some(spec);
        self
    }

    pub fn with_encoder_flow(mut self, spec: LatentFlowSpec) -> Self {
        self.encoder_flow = Some(spec);
        self
    }
}

#[derive(Debug, Clone)]
pub struct VaeKrnetModel {
    pub encoder: GaussHead,
    pub decoder: GaussHead,
    pub prior_flow: Option<KRnetModel>,
    pub encoder_flow: Option<KRnetModel>,
}

/// Intermediate values of one encoder draw.
pub struct EncoderDraw {
    pub x: Var,
    /// `log q(x | y)` per row.
    pub log_q: Var,
}

impl VaeKrnetModel {
    pub fn new(config: &VaeKrnetConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.n == 0 || config.d == 0 {
            return Err(Error::Config("data and latent dimensions must be positive".into()));
        }
        let encoder = GaussHead::new(config.n, config.d, config.depth, config.width, rng)?;
        let decoder = GaussHead::new(config.d, config.n, config.depth, config.width, rng)?;
        let prior_flow = config.prior_flow.map(|s| s.build(config.d, rng)).transpose()?;
        let encoder_flow = config.encoder_flow.map(|s| s.build(config.d, rng)).transpose()?;
        Ok(Self { encoder, decoder, prior_flow, encoder_flow })
    }

    pub fn from_parts(
        encoder: GaussHead,
        decoder: GaussHead,
        prior_flow: Option<KRnetModel>,
        encoder_flow: Option<KRnetModel>,
    ) -> Result<Self> {
        let (n, d) = (encoder.input_dim(), encoder.output_dim());
        if decoder.input_dim() != d || decoder.output_dim() != n {
            return Err(Error::Shape(format!(
                "decoder maps {} -> {}, expected {d} -> {n}",
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        for flow in prior_flow.iter().chain(&encoder_flow) {
            if flow.dim() != d {
                return Err(Error::Shape(format!("latent flow has dimension {}, expected {d}", flow.dim())));
            }
        }
        Ok(Self { encoder, decoder, prior_flow, encoder_flow })
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// `log p_X(x)` per row of `x`.
    pub fn prior_log_pdf_batch(&self, g: &Graph, x: &Var) -> Result<Var> {
        Ok(match &self.prior_flow {
            None => std_normal_logpdf(x),
            Some(f) => {
                let (z, ld) = f.forward(g, x)?;
                std_normal_logpdf(&z).add(&ld)
            }
        })
    }

    pub fn prior_log_pdf(&self, x: &[f64]) -> Result<f64> {
        let g = Graph::no_grad();
        Ok(self.prior_log_pdf_batch(&g, &g.constant(row(x)?))?.data()[0])
    }

    /// Reparameterized encoder draw from given noise `xi` (one row per row of `y`).
    pub fn encoder_draw(&self, g: &Graph, y: &Var, xi: &Tensor) -> Result<EncoderDraw> {
        if xi.rows() != y.rows() || xi.cols() != self.latent_dim() {
            return Err(Error::Shape(format!("noise {:?} does not match batch {:?}", xi.shape(), y.shape())));
        }
        let (mu, log_std) = self.encoder.forward(g, y)?;
        let xi = g.constant(xi.clone());
        let (u, log_q) = match &self.encoder_flow {
            None => (xi.clone(), std_normal_logpdf(&xi)),
            Some(f) => {
                let (u, ld_inv) = f.inverse(g, &xi)?;
                (u, std_normal_logpdf(&xi).sub(&ld_inv))
            }
        };
        let x = mu.add(&u.mul(&log_std.exp()));
        Ok(EncoderDraw { x, log_q: log_q.sub(&log_std.sum_cols()) })
    }

    /// One draw `x ~ q(. | y)` and the noise `xi` that produced it.
    pub fn encoder_sample(&self, y: &[f64], rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let xi = gauss_sample(rng, 1, self.latent_dim());
        let g = Graph::no_grad();
        let draw = self.encoder_draw(&g, &g.constant(row(y)?), &xi)?;
        Ok((draw.x.data().to_vec(), xi.into_data()))
    }

    /// `log q(x | y)` per row pair.
    pub fn encoder_cond_log_pdf_batch(&self, g: &Graph, x: &Var, y: &Var) -> Result<Var> {
        let (mu, log_std) = self.encoder.forward(g, y)?;
        let u = x.sub(&mu).mul(&log_std.neg().exp());
        let base = match &self.encoder_flow {
            None => std_normal_logpdf(&u),
            Some(f) => {
                let (z, ld) = f.forward(g, &u)?;
                std_normal_logpdf(&z).add(&ld)
            }
        };
        let lq = base.sub(&log_std.sum_cols());
        if !lq.value().all_finite() {
            return Err(Error::NonFinite("encoder density".into()));
        }
        Ok(lq)
    }

    pub fn encoder_cond_log_pdf(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let g = Graph::no_grad();
        Ok(self.encoder_cond_log_pdf_batch(&g, &g.constant(row(x)?), &g.constant(row(y)?))?.data()[0])
    }

    /// `log p(y | x)` per row pair.
    pub fn decoder_log_lik(&self, g: &Graph, y: &Var, x: &Var) -> Result<Var> {
        let (mu, log_std) = self.decoder.forward(g, x)?;
        Ok(diag_gauss_log_pdf(y, &mu, &log_std))
    }

    /// Single-draw ELBO per row of `y` under the given encoder noise.
    pub fn elbo_with_noise(&self, g: &Graph, y: &Var, xi: &Tensor) -> Result<Var> {
        let draw = self.encoder_draw(g, y, xi)?;
        let log_prior = self.prior_log_pdf_batch(g, &draw.x)?;
        let log_lik = self.decoder_log_lik(g, y, &draw.x)?;
        let elbo = log_lik.add(&log_prior).sub(&draw.log_q);
        if !elbo.value().all_finite() {
            return Err(Error::NonFinite("ELBO".into()));
        }
        Ok(elbo)
    }

    /// Single-draw ELBO per row of `y` (a vector counts as one row).
    pub fn elbo(&self, g: &Graph, y: &Tensor, rng: &mut impl Rng) -> Result<Var> {
        let y = as_batch(y);
        let xi = gauss_sample(rng, y.rows(), self.latent_dim());
        self.elbo_with_noise(g, &g.constant(y), &xi)
    }

    /// Per-row ELBO without recording, in chunks, with noise from `seed`.
    pub fn elbo_values(&self, y: &Tensor, seed: u64) -> Result<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        let mut out = Vec::with_capacity(y.rows());
        for start in (0..y.rows()).step_by(EVAL_CHUNK) {
            let chunk = y.slice_rows(start, (start + EVAL_CHUNK).min(y.rows()));
            let g = Graph::no_grad();
            out.extend_from_slice(self.elbo(&g, &chunk, &mut rng)?.data());
        }
        Ok(out)
    }

    /// Latent draws `f_pr^-1(xi)`.
    pub fn sample_prior(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        match &self.prior_flow {
            None => Ok(gauss_sample(rng, count, self.latent_dim())),
            Some(f) => f.sample(count, rng),
        }
    }

    /// Generative draws `y = mu_de(x) + sigma_de(x) * eta` with `x` from the prior.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if count == 0 {
            return Ok(Tensor::zeros(&[0, self.data_dim()]));
        }
        let x = self.sample_prior(count, rng)?;
        let eta = gauss_sample(rng, count, self.data_dim());
        let g = Graph::no_grad();
        let (mu, log_std) = self.decoder.forward(&g, &g.constant(x))?;
        Ok(mu.add(&g.constant(eta).mul(&log_std.exp())).value().clone())
    }

    /// Prior Monte Carlo estimate of `log p_Y(y)` from `count` prior draws.
    pub fn marginal_log_pdf_prior_mc(&self, y: &[f64], count: usize, rng: &mut impl Rng) -> Result<f64> {
        self.marginal(y, count, |chunk, g, yv| {
            let x = g.constant(self.sample_prior(chunk, rng)?);
            self.decoder_log_lik(g, yv, &x)
        })
    }

    /// Importance-sampling estimate of `log p_Y(y)` with the encoder as proposal.
    pub fn marginal_log_pdf_importance(&self, y: &[f64], count: usize, rng: &mut impl Rng) -> Result<f64> {
        self.marginal(y, count, |chunk, g, yv| {
            let xi = gauss_sample(rng, chunk, self.latent_dim());
            let draw = self.encoder_draw(g, yv, &xi)?;
            if draw.log_q.data().iter().any(|v| *v == f64::NEG_INFINITY) {
                return Err(Error::Numerical("proposal density vanished at a draw".into()));
            }
            let lw = self.decoder_log_lik(g, yv, &draw.x)?.add(&self.prior_log_pdf_batch(g, &draw.x)?);
            Ok(lw.sub(&draw.log_q))
        })
    }

    fn marginal(
        &self,
        y: &[f64],
        count: usize,
        mut log_terms: impl FnMut(usize, &Graph, &Var) -> Result<Var>,
    ) -> Result<f64> {
        if count == 0 {
            return Err(Error::Config("estimator needs at least one draw".into()));
        }
        if y.len() != self.data_dim() {
            return Err(Error::Shape(format!("point has {} entries, model {}", y.len(), self.data_dim())));
        }
        let mut terms = Vec::with_capacity(count);
        let mut done = 0;
        while done < count {
            let chunk = EVAL_CHUNK.min(count - done);
            let g = Graph::no_grad();
            let yv = g.constant(crate::vae::tile_rows(&row(y)?, chunk));
            terms.extend_from_slice(log_terms(chunk, &g, &yv)?.data());
            done += chunk;
        }
        log_mean_exp(&terms)
    }
}

/// `log((1/N) sum exp(v_i))`, stable against overflow.
pub fn log_mean_exp(v: &[f64]) -> Result<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || v.is_empty() {
        return Err(Error::Numerical("every estimator term is zero".into()));
    }
    if max.is_nan() || max == f64::INFINITY {
        return Err(Error::NonFinite("estimator term".into()));
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + (s / v.len() as f64).ln())
}

fn row(v: &[f64]) -> Result<Tensor> {
    Tensor::matrix(1, v.len(), v.to_vec())
}

impl Parameterized for VaeKrnetModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        for f in self.prior_flow.iter().chain(&self.encoder_flow) {
            p.extend(f.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        for f in self.prior_flow.iter_mut().chain(self.encoder_flow.iter_mut()) {
            p.extend(f.params_mut());
        }
        p
    }
}

/// Mean and standard error of a sample.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Settings for fitting a VAE-KRnet to samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTrainConfig {
    pub epochs: usize,
    /// Minibatch size; the training set is reshuffled every epoch.
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between validation passes.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DataTrainConfig {
    fn default() -> Self {
        Self { epochs: 2000, batch_size: 25_000, lr: 1e-3, eval_every: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean negative ELBO over the epoch's minibatches.
    pub train_loss: f64,
    /// Mean validation ELBO and its standard error.
    pub val_elbo: f64,
    pub val_se: f64,
}

#[derive(Debug, Clone)]
pub struct DataFit {
    /// Snapshot with the highest validation ELBO.
    pub best: VaeKrnetModel,
    pub best_val_elbo: f64,
    pub history: Vec<EpochRecord>,
    pub skipped_steps: usize,
}

/// Maximizes the ELBO over `data` with Adam. `on_eval` sees every validation
/// record and may stop training early by returning `false`.
pub fn train_on_data(
    model: VaeKrnetModel,
    data: &Tensor,
    validation: &Tensor,
    cfg: &DataTrainConfig,
    mut on_eval: impl FnMut(&EpochRecord) -> bool,
) -> Result<DataFit> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch size and validation cadence must be positive".into()));
    }
    if data.cols() != model.data_dim() || validation.cols() != model.data_dim() {
        return Err(Error::Shape("training data width does not match the model".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let val_seed = cfg.seed ^ 0x5eed_0f_7a11;
    let mut model = model;
    let mut opt = Adam::new(cfg.lr);
    let mut best_val = f64::NEG_INFINITY;
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut order: Vec<usize> = (0..data.rows()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = gather_rows(data, idx);
            let g = Graph::new();
            let loss = match model.elbo(&g, &batch, &mut rng) {
                Ok(e) => e.mean().neg(),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let grads = match g.backward(&loss) {
                Ok(gr) if gr.all_finite() => gr,
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            opt.step(&mut model, &grads)?;
            sum += loss.item();
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::TrainingAborted(format!("every step of epoch {epoch} was non-finite")));
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (val_elbo, val_se) = mean_and_se(&model.elbo_values(validation, val_seed)?);
            if val_elbo > best_val {
                best_val = val_elbo;
                best = model.clone();
            }
            let rec = EpochRecord { epoch, train_loss: sum / steps as f64, val_elbo, val_se };
            history.push(rec.clone());
            if !on_eval(&rec) {
                break;
            }
        }
    }
    if history.is_empty() {
        best_val = mean_and_se(&best.elbo_values(validation, val_seed)?).0;
    }
    Ok(DataFit { best, best_val_elbo: best_val, history, skipped_steps: skipped })
}

pub(crate) fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(&[idx.len(), c], data).expect("gathered shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_layers::ScaleBias;

    #[test]
    fn scaled_prior_matches_change_of_variables() {
        let mut rng = seeded_rng(1);
        let cfg = VaeKrnetConfig::canonical(2, 1, 1, 4).with_prior_flow(LatentFlowSpec::new(1, 4));
        let mut m = VaeKrnetModel::new(&cfg, &mut rng).unwrap();
        let flow = m.prior_flow.as_mut().unwrap();
        let sb: &mut ScaleBias = flow.scale_bias_layers_mut().next().unwrap();
        *sb = ScaleBias::from_params(vec![2.0], vec![0.0]).unwrap();
        let x = 0.7;
        let expect = -0.5 * (2.0 * x) * (2.0 * x) - 0.5 * (2.0 * std::f64::consts::PI).ln() + 2f64.ln();
        assert!((m.prior_log_pdf(&[x]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[1000.0, 1000.0]).unwrap() - 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]).unwrap() - 1.5f64.ln()).abs() < 1e-14);
        assert!(log_mean_exp(&[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn empty_sample_has_data_width() {
        let mut rng = seeded_rng(2);
        let m = VaeKrnetModel::new(&VaeKrnetConfig::canonical(3, 2, 1, 4), &mut rng).unwrap();
        assert_eq!(m.sample(0, &mut rng).unwrap().shape(), &[0, 3]);
        assert_eq!(m.sample(5, &mut rng).unwrap().shape(), &[5, 3]);
    }
}
