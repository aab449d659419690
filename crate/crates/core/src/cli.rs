//! Experiment runner behind the `vaekrnet` binary.
//!
//! A run is described by flat `key = value` pairs. They come from an optional
//! config file, and command-line flags of the same names override them.
//! [`RunSpec::resolve`] validates the pairs and fills in defaults.
//! [`run_experiment`] writes every artifact into a fresh output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::error::{Error, Result};
use crate::experiments::{
    delta_metric, stats_r, uniform_grid, InverseProblem, InverseSpec, LinearLatentProblem, PriorKind, StatsReport,
    STATS_HEADER,
};
use crate::krnet::{KRnetConfig, KRnetModel};
use crate::manifest::{load_manifest, save_manifest, SavedModel};
use crate::numerics::{seeded_rng, Tensor};
use crate::vae_krnet::{train_on_data, DataTrainConfig, EpochRecord, LatentFlowSpec, VaeKrnetConfig, VaeKrnetModel};
use crate::vb::{
    continue_with, train_flow, train_vae_krnet, write_trace_csv, Lambda, MeanFieldModel, TargetDensity, TraceRow,
    TrainConfig, TrainOutcome, VariationalFlow,
};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "linear-gaussian | hole2d | hole3d | inverse"),
    ("model", "vae | vae-krnet | krnet | mean-field"),
    ("n", "data / unknown dimension"),
    ("d", "latent dimension (VAE models)"),
    ("sigma", "observation noise level"),
    ("depth", "hidden layers D of encoder and decoder"),
    ("width", "hidden width N_D of encoder and decoder"),
    ("l", "KRnet inner depth L"),
    ("k", "KRnet block count K"),
    ("step", "dimensions frozen per KRnet block"),
    ("hidden", "coupling network width N_L"),
    ("rotation", "KRnet rotation layers (true | false)"),
    ("nonlinear", "KRnet nonlinear layers (true | false)"),
    ("l_pr", "prior flow depth L_pr (0 = Gaussian prior)"),
    ("l_en", "encoder flow depth L_en (0 = Gaussian encoder)"),
    ("latent_step", "dimensions frozen per latent flow block"),
    ("lambda", "mutual-information weight (> 1 or inf)"),
    ("seed", "master seed"),
    ("iterations", "training iterations (posterior runs)"),
    ("stage2_iterations", "iterations of the finite-lambda stage"),
    ("batch", "minibatch size"),
    ("val_size", "validation set size"),
    ("val_every", "iterations (or epochs) between validations"),
    ("lr", "Adam learning rate"),
    ("lr_final", "learning rate reached at the end (none = constant)"),
    ("abort_after", "consecutive non-finite steps before aborting"),
    ("epochs", "epochs (data runs)"),
    ("samples", "training set size (data runs)"),
    ("stop_delta", "stop a data run once validation delta drops below this (none = never)"),
    ("hy_outer", "outer draws of the nested h(Y) estimate"),
    ("hy_inner", "inner draws of the nested h(Y) estimate"),
    ("gamma", "eigenvalue decay of the forward operator"),
    ("nx", "collocation points (0 = 20 n)"),
    ("stats_samples", "model samples used for statistics"),
    ("stats_grid", "grid points used for statistics"),
    ("dump_count", "rows written to samples.csv"),
];

fn is_key(k: &str) -> bool {
    KEYS.iter().any(|(name, _)| *name == k)
}

fn unknown_key(k: &str) -> Error {
    let names: Vec<&str> = KEYS.iter().map(|(n, _)| *n).collect();
    Error::Config(format!("unknown key `{k}`; valid keys: {}", names.join(", ")))
}

/// Parses `key = value` lines. `#` starts a comment. Repeated keys are an error.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !is_key(&k) {
            return Err(unknown_key(&k));
        }
        if let Some(first) = seen.insert(k.clone(), i + 1) {
            return Err(Error::Config(format!("duplicate key `{k}` on lines {first} and {}", i + 1)));
        }
        out.insert(k, v);
    }
    Ok(out)
}

/// Applies command-line overrides on top of file values.
pub fn merge_overrides(mut base: BTreeMap<String, String>, overrides: &[(String, String)]) -> Result<BTreeMap<String, String>> {
    let mut seen = std::collections::BTreeSet::new();
    for (k, v) in overrides {
        if !is_key(k) {
            return Err(unknown_key(k));
        }
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!("duplicate key `{k}` on the command line")));
        }
        base.insert(k.clone(), v.clone());
    }
    Ok(base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    LinearGaussian,
    Hole2d,
    Hole3d,
    Inverse,
}

impl Experiment {
    fn prior(self) -> Option<PriorKind> {
        match self {
            Experiment::LinearGaussian => Some(PriorKind::Gaussian),
            Experiment::Hole2d => Some(PriorKind::Hole2d),
            Experiment::Hole3d => Some(PriorKind::Hole3d),
            Experiment::Inverse => None,
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-gaussian" => Ok(Self::LinearGaussian),
            "hole2d" => Ok(Self::Hole2d),
            "hole3d" => Ok(Self::Hole3d),
            "inverse" => Ok(Self::Inverse),
            _ => Err(Error::Config(format!("experiment `{s}` is not one of linear-gaussian, hole2d, hole3d, inverse"))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearGaussian => "linear-gaussian",
            Self::Hole2d => "hole2d",
            Self::Hole3d => "hole3d",
            Self::Inverse => "inverse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    VaeKrnet,
    Krnet,
    MeanField,
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Self::Vae),
            "vae-krnet" => Ok(Self::VaeKrnet),
            "krnet" => Ok(Self::Krnet),
            "mean-field" => Ok(Self::MeanField),
            _ => Err(Error::Config(format!("model `{s}` is not one of vae, vae-krnet, krnet, mean-field"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vae => "vae",
            Self::VaeKrnet => "vae-krnet",
            Self::Krnet => "krnet",
            Self::MeanField => "mean-field",
        })
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub experiment: Experiment,
    pub model: ModelKind,
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub depth: usize,
    pub width: usize,
    pub l: usize,
    pub k: usize,
    pub step: usize,
    pub hidden: usize,
    pub rotation: bool,
    pub nonlinear: bool,
    pub l_pr: usize,
    pub l_en: usize,
    pub latent_step: usize,
    pub lambda: Lambda,
    pub seed: u64,
    pub iterations: usize,
    pub stage2_iterations: usize,
    pub batch: usize,
    pub val_size: usize,
    pub val_every: usize,
    pub lr: f64,
    pub lr_final: Option<f64>,
    pub abort_after: usize,
    pub epochs: usize,
    pub samples: usize,
    pub stop_delta: Option<f64>,
    pub hy_outer: usize,
    pub hy_inner: usize,
    pub gamma: f64,
    pub nx: usize,
    pub stats_samples: usize,
    pub stats_grid: usize,
    pub dump_count: usize,
}

struct Fields<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Fields<'_> {
    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    fn positive(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.get(key, default)?;
        if v == 0 {
            return Err(Error::Config(format!("key `{key}` must be positive")));
        }
        Ok(v)
    }

    fn optional_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.map.get(key).map(String::as_str) {
            None | Some("none") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: `{v}` is neither a number nor `none`"))),
        }
    }
}

fn lambda_value(s: &str) -> Result<Lambda> {
    let v: f64 = match s {
        "inf" | "infinity" | "Inf" | "∞" => f64::INFINITY,
        _ => s.parse().map_err(|_| Error::Config(format!("key `lambda`: cannot parse `{s}`")))?,
    };
    Lambda::finite(v).map_err(|e| Error::Config(format!("key `lambda`: {e}")))
}

impl RunSpec {
    /// Validates the key/value pairs and fills in defaults.
    pub fn resolve(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !is_key(k)) {
            return Err(unknown_key(k));
        }
        let f = Fields { map };
        let experiment: Experiment = f.get("experiment", Experiment::Inverse)?;
        let inverse = experiment == Experiment::Inverse;
        let default_model = if inverse { ModelKind::Krnet } else { ModelKind::Vae };
        let model: ModelKind = f.get("model", default_model)?;
        match (inverse, model) {
            (false, ModelKind::Krnet | ModelKind::MeanField) => {
                return Err(Error::Config(format!("model `{model}` needs experiment=inverse; data runs use vae or vae-krnet")))
            }
            (true, ModelKind::Vae) => {
                return Err(Error::Config("experiment=inverse has no decoder target; use model=vae-krnet, krnet or mean-field".into()))
            }
            _ => {}
        }
        let latent_models = matches!(model, ModelKind::Vae | ModelKind::VaeKrnet);
        for key in ["d", "depth", "width", "l_pr", "l_en", "latent_step"] {
            if !latent_models && f.has(key) {
                return Err(Error::Config(format!("key `{key}` only applies to vae and vae-krnet models")));
            }
        }
        for key in ["l", "k", "step", "rotation", "nonlinear"] {
            if model != ModelKind::Krnet && f.has(key) {
                return Err(Error::Config(format!("key `{key}` only applies to model=krnet")));
            }
        }
        if matches!(model, ModelKind::Vae | ModelKind::MeanField) && f.has("hidden") {
            return Err(Error::Config(format!("key `hidden` sets flow widths; model={model} has no flows")));
        }
        if model == ModelKind::Vae && (f.get("l_pr", 0usize)? > 0 || f.get("l_en", 0usize)? > 0) {
            return Err(Error::Config("model=vae has no latent flows; use model=vae-krnet for l_pr or l_en".into()));
        }
        let lambda = match map.get("lambda") {
            None => Lambda::Infinite,
            Some(s) => lambda_value(s)?,
        };
        if !lambda.is_infinite() && !(inverse && model == ModelKind::VaeKrnet) {
            return Err(Error::Config("a finite lambda needs experiment=inverse with model=vae-krnet".into()));
        }
        let n = f.positive("n", 10)?;
        let d_default = match experiment {
            Experiment::Hole3d => 3,
            Experiment::Inverse => 4,
            _ => 2,
        };
        let d = f.positive("d", d_default)?;
        if let Some(p) = experiment.prior() {
            if p != PriorKind::Gaussian && d != p.latent_dim(d) {
                return Err(Error::Config(format!("experiment={experiment} fixes d = {}", p.latent_dim(d))));
            }
        }
        let iterations = f.positive("iterations", 100_000)?;
        let spec = RunSpec {
            experiment,
            model,
            n,
            d,
            sigma: f.get("sigma", if inverse { 0.05 } else { 0.1 })?,
            depth: f.get("depth", 2)?,
            width: f.positive("width", 32)?,
            l: f.positive("l", 6)?,
            k: f.positive("k", 5.min(n))?,
            step: f.positive("step", 2)?,
            hidden: f.positive("hidden", 24)?,
            rotation: f.get("rotation", false)?,
            nonlinear: f.get("nonlinear", false)?,
            l_pr: f.get("l_pr", match (model, inverse) {
                (ModelKind::Vae, _) => 0,
                (_, true) => 6,
                (_, false) => 2,
            })?,
            l_en: f.get("l_en", if model == ModelKind::Vae { 0 } else { 2 })?,
            latent_step: f.positive("latent_step", if inverse { 2 } else { 1 })?,
            lambda,
            seed: f.get("seed", 0)?,
            iterations,
            stage2_iterations: f.positive("stage2_iterations", iterations)?,
            batch: f.positive("batch", if inverse { 64 } else { 25_000 })?,
            val_size: f.get("val_size", 200_000)?,
            val_every: f.positive("val_every", if inverse { 1000 } else { 10 })?,
            lr: f.get("lr", 1e-3)?,
            lr_final: f.optional_f64("lr_final")?,
            abort_after: f.positive("abort_after", 100)?,
            epochs: f.positive("epochs", 2000)?,
            samples: f.get("samples", 100_000)?,
            stop_delta: f.optional_f64("stop_delta")?,
            hy_outer: f.get("hy_outer", 10_000)?,
            hy_inner: f.get("hy_inner", 10_000)?,
            gamma: f.get("gamma", crate::experiments::DEFAULT_GAMMA)?,
            nx: f.get("nx", 0)?,
            stats_samples: f.get("stats_samples", 100_000)?,
            stats_grid: f.get("stats_grid", crate::experiments::STATS_GRID)?,
            dump_count: f.get("dump_count", 1000)?,
        };
        spec.check_ranges()?;
        Ok(spec)
    }

    fn check_ranges(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return err(format!("key `sigma` must be positive, got {}", self.sigma));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return err(format!("key `lr` must be positive, got {}", self.lr));
        }
        if let Some(l) = self.lr_final {
            if !(l > 0.0) || !l.is_finite() {
                return err(format!("key `lr_final` must be positive, got {l}"));
            }
        }
        if self.val_size < 2 {
            return err("key `val_size` must be at least 2".into());
        }
        if self.model == ModelKind::Krnet && self.k > self.n {
            return err(format!("key `k` = {} exceeds n = {}", self.k, self.n));
        }
        if self.experiment == Experiment::Inverse && self.stats_samples < 2 {
            return err("key `stats_samples` must be at least 2".into());
        }
        if self.experiment != Experiment::Inverse {
            if self.samples < 2 {
                return err("key `samples` must be at least 2".into());
            }
            if self.d >= self.n {
                return err(format!("latent dimension d = {} must be below n = {}", self.d, self.n));
            }
        }
        if self.stats_grid < 2 {
            return err("key `stats_grid` must be at least 2".into());
        }
        if !(self.gamma >= 0.0) {
            return err(format!("key `gamma` must be non-negative, got {}", self.gamma));
        }
        Ok(())
    }

    /// Resolved configuration as sorted `key = value` lines; parses back to the same spec.
    pub fn echo(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        let pairs: Vec<(&str, String)> = vec![
            ("experiment", self.experiment.to_string()),
            ("model", self.model.to_string()),
            ("n", self.n.to_string()),
            ("sigma", format!("{:?}", self.sigma)),
            ("lambda", self.lambda.to_string()),
            ("seed", self.seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("stage2_iterations", self.stage2_iterations.to_string()),
            ("batch", self.batch.to_string()),
            ("val_size", self.val_size.to_string()),
            ("val_every", self.val_every.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("lr_final", opt(self.lr_final)),
            ("abort_after", self.abort_after.to_string()),
            ("epochs", self.epochs.to_string()),
            ("samples", self.samples.to_string()),
            ("stop_delta", opt(self.stop_delta)),
            ("hy_outer", self.hy_outer.to_string()),
            ("hy_inner", self.hy_inner.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("nx", self.nx.to_string()),
            ("stats_samples", self.stats_samples.to_string()),
            ("stats_grid", self.stats_grid.to_string()),
            ("dump_count", self.dump_count.to_string()),
        ];
        let mut pairs = pairs;
        if matches!(self.model, ModelKind::Vae | ModelKind::VaeKrnet) {
            pairs.extend([
                ("d", self.d.to_string()),
                ("depth", self.depth.to_string()),
                ("width", self.width.to_string()),
                ("l_pr", self.l_pr.to_string()),
                ("l_en", self.l_en.to_string()),
                ("latent_step", self.latent_step.to_string()),
            ]);
            if self.model == ModelKind::VaeKrnet {
                pairs.push(("hidden", self.hidden.to_string()));
            }
        }
        if self.model == ModelKind::Krnet {
            pairs.extend([
                ("l", self.l.to_string()),
                ("k", self.k.to_string()),
                ("step", self.step.to_string()),
                ("hidden", self.hidden.to_string()),
                ("rotation", self.rotation.to_string()),
                ("nonlinear", self.nonlinear.to_string()),
            ]);
        }
        pairs.sort();
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch: self.batch,
            val_size: self.val_size,
            val_every: self.val_every,
            lr: self.lr,
            lr_final: self.lr_final,
            seed: self.seed,
            lambda: Lambda::Infinite,
            abort_after: self.abort_after,
        }
    }

    fn inverse_problem(&self) -> Result<InverseProblem> {
        let mut s = InverseSpec::new(self.n, self.seed);
        s.sigma = self.sigma;
        s.gamma = self.gamma;
        if self.nx > 0 {
            s.nx = self.nx;
        }
        InverseProblem::generate(&s)
    }

    fn latent_config(&self) -> VaeKrnetConfig {
        let flow = |l: usize| LatentFlowSpec::new(l, self.hidden).with_step(self.latent_step);
        let mut c = VaeKrnetConfig::canonical(self.n, self.d, self.depth, self.width);
        if self.l_pr > 0 {
            c = c.with_prior_flow(flow(self.l_pr));
        }
        if self.l_en > 0 {
            c = c.with_encoder_flow(flow(self.l_en));
        }
        c
    }
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub best_val_loss: f64,
    pub best_val_se: f64,
    /// `-log C` for inverse runs.
    pub neg_log_c: Option<f64>,
    pub mean_rel_err: Option<f64>,
    pub std_rel_err: Option<f64>,
    /// Best validation `delta` for data runs.
    pub delta: Option<f64>,
    pub skipped_steps: usize,
}

impl RunSummary {
    fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        format!(
            "best_val_loss = {:?}\nbest_val_se = {:?}\nneg_log_c = {}\nmean_rel_err = {}\nstd_rel_err = {}\ndelta = {}\nskipped_steps = {}\n",
            self.best_val_loss,
            self.best_val_se,
            opt(self.neg_log_c),
            opt(self.mean_rel_err),
            opt(self.std_rel_err),
            opt(self.delta),
            self.skipped_steps
        )
    }
}

/// Creates `dir` or accepts it if it exists and is empty.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("output path {} is not a directory", dir.display())));
        }
        if fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!("output directory {} is not empty; runs never overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Draws `count` samples from any saved model.
pub fn sample_model(model: &SavedModel, count: usize, seed: u64) -> Result<Tensor> {
    let dim = match model {
        SavedModel::Krnet(m) => m.dim(),
        SavedModel::VaeKrnet(m) => m.data_dim(),
        SavedModel::MeanField(m) => m.mean().len(),
    };
    if count == 0 {
        return Tensor::new(&[0, dim], Vec::new());
    }
    let mut rng = seeded_rng(seed);
    match model {
        SavedModel::Krnet(m) => KRnetModel::sample(m, count, &mut rng),
        SavedModel::VaeKrnet(m) => m.sample(count, &mut rng),
        SavedModel::MeanField(m) => VariationalFlow::sample(m, count, &mut rng),
    }
}

/// Writes `count` model samples as CSV: a `# seed=S` line, a header `y1,..,yn`, one row per sample.
pub fn dump_samples(model: &SavedModel, count: usize, seed: u64, path: &Path) -> Result<()> {
    let s = sample_model(model, count, seed)?;
    let mut out = create(path)?;
    writeln!(out, "# seed={seed}")?;
    let header: Vec<String> = (1..=s.cols()).map(|i| format!("y{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for r in 0..s.rows() {
        let row: Vec<String> = s.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn write_stats(report: &StatsReport, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    report.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    write_trace_csv(&mut out, rows)?;
    out.flush()?;
    Ok(())
}

/// Header of the epoch trace written by data runs.
pub const DATA_TRACE_HEADER: &str = "iter,train_loss,val_loss,val_se,delta";

fn write_data_trace(rows: &[EpochRecord], h_y: f64, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{DATA_TRACE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:?},{:?},{:?},{:?}", r.epoch, r.train_loss, -r.val_elbo, r.val_se, delta_metric(r.val_elbo, h_y))?;
    }
    out.flush()?;
    Ok(())
}

/// Posterior statistics where the mean comes from `mean_source` and the
/// variance from `var_source`.
pub fn split_stats(mean_source: &StatsReport, var_source: &StatsReport) -> StatsReport {
    StatsReport {
        mean: mean_source.mean.clone(),
        mean_rel_err: mean_source.mean_rel_err,
        var: var_source.var.clone(),
        std_rel_err: var_source.std_rel_err,
        ..mean_source.clone()
    }
}

/// Per-coordinate moments of model samples against reference moments, in the stats CSV layout.
fn coordinate_stats(model: &Tensor, reference_mean: &[f64], reference_var: &[f64], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{STATS_HEADER}")?;
    let rows = model.rows() as f64;
    for j in 0..model.cols() {
        let m = (0..model.rows()).map(|i| model.get(i, j)).sum::<f64>() / rows;
        let v = (0..model.rows()).map(|i| (model.get(i, j) - m).powi(2)).sum::<f64>() / (rows - 1.0);
        writeln!(out, "{},{m:?},{:?},{v:?},{:?}", j + 1, reference_mean[j], reference_var[j])?;
    }
    out.flush()?;
    Ok(())
}

fn column_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let rows = t.rows() as f64;
    (0..t.cols())
        .map(|j| {
            let m = (0..t.rows()).map(|i| t.get(i, j)).sum::<f64>() / rows;
            let v = (0..t.rows()).map(|i| (t.get(i, j) - m).powi(2)).sum::<f64>() / (rows - 1.0);
            (m, v)
        })
        .unzip()
}

fn run_data(spec: &RunSpec, dir: &Path) -> Result<RunSummary> {
    let prior = spec.experiment.prior().expect("data experiment");
    let mut rng = seeded_rng(spec.seed);
    let problem = LinearLatentProblem::generate(spec.n, spec.d, spec.sigma, prior, &mut rng)?;
    let data = problem.gen_linear_data(spec.samples, &mut rng)?;
    let validation = problem.gen_linear_data(spec.val_size, &mut rng)?;
    let h_y = match prior {
        PriorKind::Gaussian => problem.entropy_hy_analytic()?,
        _ => problem.entropy_hy_nested_mc(spec.hy_outer, spec.hy_inner, &mut rng)?.0,
    };
    fs::write(dir.join("problem.json"), serde_json::to_string_pretty(&problem)?)?;
    let model = VaeKrnetModel::new(&spec.latent_config(), &mut rng)?;
    let cfg = DataTrainConfig { epochs: spec.epochs, batch_size: spec.batch, lr: spec.lr, eval_every: spec.val_every, seed: spec.seed };
    let stop = spec.stop_delta;
    let fit = train_on_data(model, &data, &validation, &cfg, |r| stop.is_none_or(|s| delta_metric(r.val_elbo, h_y) >= s))?;
    write_data_trace(&fit.history, h_y, &dir.join("trace.csv"))?;
    let saved = SavedModel::VaeKrnet(fit.best.clone());
    save_manifest(&saved, &dir.join("model.manifest"))?;
    dump_samples(&saved, spec.dump_count, spec.seed, &dir.join("samples.csv"))?;
    let generated = sample_model(&saved, spec.stats_samples.max(2), spec.seed.wrapping_add(1))?;
    let (ref_mean, ref_var) = match prior {
        PriorKind::Gaussian => {
            let cov = problem.data_covariance()?;
            (vec![0.0; spec.n], (0..spec.n).map(|i| cov[(i, i)]).collect())
        }
        _ => column_moments(&validation),
    };
    coordinate_stats(&generated, &ref_mean, &ref_var, &dir.join("stats.csv"))?;
    let best = fit.history.iter().max_by(|a, b| a.val_elbo.total_cmp(&b.val_elbo));
    Ok(RunSummary {
        best_val_loss: -fit.best_val_elbo,
        best_val_se: best.map_or(f64::NAN, |r| r.val_se),
        neg_log_c: None,
        mean_rel_err: None,
        std_rel_err: None,
        delta: Some(delta_metric(fit.best_val_elbo, h_y)),
        skipped_steps: fit.skipped_steps,
    })
}

fn finish_posterior(
    spec: &RunSpec,
    dir: &Path,
    problem: &InverseProblem,
    saved: &SavedModel,
    stats: StatsReport,
    outcome: (&[TraceRow], f64, f64, usize),
) -> Result<RunSummary> {
    let (trace, best, se, skipped) = outcome;
    write_trace(trace, &dir.join("trace.csv"))?;
    write_stats(&stats, &dir.join("stats.csv"))?;
    save_manifest(saved, &dir.join("model.manifest"))?;
    dump_samples(saved, spec.dump_count, spec.seed, &dir.join("samples.csv"))?;
    Ok(RunSummary {
        best_val_loss: best,
        best_val_se: se,
        neg_log_c: Some(-problem.log_norm_const()?),
        mean_rel_err: Some(stats.mean_rel_err),
        std_rel_err: Some(stats.std_rel_err),
        delta: None,
        skipped_steps: skipped,
    })
}

fn model_stats(spec: &RunSpec, problem: &InverseProblem, model: &SavedModel) -> Result<StatsReport> {
    let s = sample_model(model, spec.stats_samples, spec.seed.wrapping_add(1))?;
    stats_r(&s, problem, &uniform_grid(spec.stats_grid))
}

fn summarize<M>(o: &TrainOutcome<M>) -> (&[TraceRow], f64, f64, usize) {
    (&o.trace, o.best_val, o.best_val_se, o.skipped_steps)
}

fn run_inverse(spec: &RunSpec, dir: &Path) -> Result<RunSummary> {
    let problem = spec.inverse_problem()?;
    problem.save_json(&dir.join("problem.json"))?;
    let cfg = spec.train_config();
    let mut rng = seeded_rng(spec.seed.wrapping_add(0x9e37_79b9));
    match spec.model {
        ModelKind::Krnet => {
            let kc = KRnetConfig::stepped(spec.n, spec.step, spec.k, spec.l, spec.hidden)?
                .with_rotation(spec.rotation)
                .with_nonlinear(spec.nonlinear);
            let mut model = KRnetModel::new(kc, &mut rng)?;
            model.mark_identity_initialized();
            let o = train_flow(model, &problem, &cfg)?;
            let saved = SavedModel::Krnet(o.best.clone());
            let stats = model_stats(spec, &problem, &saved)?;
            finish_posterior(spec, dir, &problem, &saved, stats, summarize(&o))
        }
        ModelKind::MeanField => {
            let o = train_flow(MeanFieldModel::new(spec.n), &problem, &cfg)?;
            let saved = SavedModel::MeanField(o.best.clone());
            let stats = model_stats(spec, &problem, &saved)?;
            finish_posterior(spec, dir, &problem, &saved, stats, summarize(&o))
        }
        ModelKind::VaeKrnet => {
            let model = VaeKrnetModel::new(&spec.latent_config(), &mut rng)?;
            let stage1 = train_vae_krnet(model, &problem, &cfg)?;
            let mean_saved = SavedModel::VaeKrnet(stage1.best.clone());
            match spec.lambda {
                Lambda::Infinite => {
                    let stats = model_stats(spec, &problem, &mean_saved)?;
                    finish_posterior(spec, dir, &problem, &mean_saved, stats, summarize(&stage1))
                }
                lambda => {
                    let o = continue_stage(spec, &problem, &stage1, lambda)?;
                    save_manifest(&mean_saved, &dir.join("mean_model.manifest"))?;
                    let saved = SavedModel::VaeKrnet(o.best.clone());
                    let stats = split_stats(&model_stats(spec, &problem, &mean_saved)?, &model_stats(spec, &problem, &saved)?);
                    let trace = joined_trace(&stage1, &o);
                    finish_posterior(spec, dir, &problem, &saved, stats, (&trace, o.best_val, o.best_val_se, stage1.skipped_steps + o.skipped_steps))
                }
            }
        }
        ModelKind::Vae => unreachable!("rejected by RunSpec::resolve"),
    }
}

/// Second stage: continues the best stage-one model under `lambda` with seed + 1.
fn continue_stage(
    spec: &RunSpec,
    target: &dyn TargetDensity,
    stage1: &TrainOutcome<VaeKrnetModel>,
    lambda: Lambda,
) -> Result<TrainOutcome<VaeKrnetModel>> {
    let cfg = TrainConfig { iterations: spec.stage2_iterations, lambda, seed: spec.seed.wrapping_add(1), ..spec.train_config() };
    continue_with(stage1, target, &cfg)
}

/// Stage-two rows follow stage one, with iteration numbers continuing.
fn joined_trace<M>(stage1: &TrainOutcome<M>, stage2: &TrainOutcome<M>) -> Vec<TraceRow> {
    let offset = stage1.trace.last().map_or(0, |r| r.iter);
    let mut rows = stage1.trace.clone();
    rows.extend(stage2.trace.iter().map(|r| TraceRow { iter: r.iter + offset, ..r.clone() }));
    rows
}

/// Runs one experiment into `dir`, which must be absent or empty.
pub fn run_experiment(spec: &RunSpec, dir: &Path) -> Result<RunSummary> {
    prepare_output_dir(dir)?;
    fs::write(dir.join("config.txt"), spec.echo())?;
    let summary = match spec.experiment {
        Experiment::Inverse => run_inverse(spec, dir)?,
        _ => run_data(spec, dir)?,
    };
    fs::write(dir.join("summary.txt"), summary.to_text())?;
    Ok(summary)
}

/// Header of the table written by [`run_sweep`].
pub const SWEEP_HEADER: &str = "value,best_val_loss,best_val_se,mean_rel_err,std_rel_err,delta";

/// Runs `base` once per value of `param`, each into `dir/<param>=<value>`, and
/// writes `dir/sweep.csv`.
///
/// A lambda sweep on the inverse problem trains the `lambda = inf` stage once
/// (kept in `dir/stage1`) and continues it for every value, `inf` included, so
/// all arms get the same budget.
pub fn run_sweep(base: &BTreeMap<String, String>, param: &str, values: &[String], dir: &Path) -> Result<Vec<(String, RunSummary)>> {
    if !is_key(param) {
        return Err(unknown_key(param));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut specs = Vec::new();
    for v in values {
        let mut m = base.clone();
        m.insert(param.to_string(), v.clone());
        specs.push((v.clone(), RunSpec::resolve(&m)?));
    }
    prepare_output_dir(dir)?;
    let lambda_sweep = param == "lambda" && specs[0].1.experiment == Experiment::Inverse;
    let results = if lambda_sweep { lambda_sweep_runs(&specs, dir)? } else {
        specs
            .iter()
            .map(|(v, s)| Ok((v.clone(), run_experiment(s, &dir.join(format!("{param}={v}")))?)))
            .collect::<Result<Vec<_>>>()?
    };
    let mut out = create(&dir.join("sweep.csv"))?;
    writeln!(out, "{SWEEP_HEADER}")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for (v, s) in &results {
        writeln!(
            out,
            "{v},{:?},{:?},{},{},{}",
            s.best_val_loss,
            s.best_val_se,
            opt(s.mean_rel_err),
            opt(s.std_rel_err),
            opt(s.delta)
        )?;
    }
    out.flush()?;
    Ok(results)
}

fn lambda_sweep_runs(specs: &[(String, RunSpec)], dir: &Path) -> Result<Vec<(String, RunSummary)>> {
    let first = &specs[0].1;
    let stage1_spec = RunSpec { lambda: Lambda::Infinite, ..first.clone() };
    let stage_dir = dir.join("stage1");
    prepare_output_dir(&stage_dir)?;
    fs::write(stage_dir.join("config.txt"), stage1_spec.echo())?;
    let problem = first.inverse_problem()?;
    problem.save_json(&stage_dir.join("problem.json"))?;
    let mut rng = seeded_rng(first.seed.wrapping_add(0x9e37_79b9));
    let stage1 = train_vae_krnet(VaeKrnetModel::new(&first.latent_config(), &mut rng)?, &problem, &stage1_spec.train_config())?;
    let mean_saved = SavedModel::VaeKrnet(stage1.best.clone());
    write_stats(&model_stats(first, &problem, &mean_saved)?, &stage_dir.join("stats.csv"))?;
    write_trace(&stage1.trace, &stage_dir.join("trace.csv"))?;
    save_manifest(&mean_saved, &stage_dir.join("model.manifest"))?;
    let mut results = Vec::new();
    for (v, spec) in specs {
        let sub = dir.join(format!("lambda={v}"));
        prepare_output_dir(&sub)?;
        fs::write(sub.join("config.txt"), spec.echo())?;
        let o = continue_stage(spec, &problem, &stage1, spec.lambda)?;
        let saved = SavedModel::VaeKrnet(o.best.clone());
        // each arm reports its own moments, unlike the two-stage split of `run`
        let own = model_stats(spec, &problem, &saved)?;
        let trace = joined_trace(&stage1, &o);
        let summary = finish_posterior(spec, &sub, &problem, &saved, own, (&trace, o.best_val, o.best_val_se, o.skipped_steps))?;
        fs::write(sub.join("summary.txt"), summary.to_text())?;
        results.push((v.clone(), summary));
    }
    Ok(results)
}

/// Recomputes posterior statistics for a finished inverse run.
pub fn stats_for_run(run_dir: &Path, count: usize, seed: u64, grid: usize) -> Result<StatsReport> {
    let problem = InverseProblem::load_json(&run_dir.join("problem.json"))
        .map_err(|e| Error::Config(format!("{}: not an inverse-problem run ({e})", run_dir.display())))?;
    let model = load_manifest(&run_dir.join("model.manifest"))?;
    if count < 2 || grid < 2 {
        return Err(Error::Config("stats needs at least two samples and two grid points".into()));
    }
    let s = sample_model(&model, count, seed)?;
    stats_r(&s, &problem, &uniform_grid(grid))
}

/// The `clap` command tree. Every config key is also a `--key value` flag on `run` and `sweep`.
pub fn command() -> Command {
    let with_keys = |mut c: Command| {
        c = c
            .arg(Arg::new("config").long("config").value_name("FILE").help("flat key = value config file"))
            .arg(Arg::new("out").long("out").value_name("DIR").required(true).help("output directory (absent or empty)"));
        for (k, help) in KEYS {
            c = c.arg(Arg::new(*k).long(*k).value_name("VALUE").help(*help).action(ArgAction::Append));
        }
        c
    };
    Command::new("vaekrnet")
        .about("KRnet, VAE-KRnet and variational Bayes experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(Command::new("run").about("train one model and write its artifacts")))
        .subcommand(with_keys(
            Command::new("sweep")
                .about("repeat a run over values of one key (e.g. lambda or d)")
                .arg(Arg::new("param").long("param").required(true).value_name("KEY"))
                .arg(Arg::new("values").long("values").required(true).value_name("V1,V2,..").value_delimiter(',')),
        ))
        .subcommand(
            Command::new("stats")
                .about("posterior statistics of a finished inverse run")
                .arg(Arg::new("run").required(true).value_name("RUN_DIR"))
                .arg(Arg::new("count").long("count").default_value("100000").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(clap::value_parser!(u64)))
                .arg(Arg::new("grid").long("grid").default_value("256").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("out").long("out").value_name("FILE").help("CSV path (default: stdout)")),
        )
        .subcommand(
            Command::new("dump")
                .about("write model samples to CSV")
                .arg(Arg::new("manifest").required(true).value_name("MODEL_MANIFEST"))
                .arg(Arg::new("count").long("count").default_value("1000").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(clap::value_parser!(u64)))
                .arg(Arg::new("out").long("out").required(true).value_name("FILE")),
        )
}

fn collect_keys(m: &ArgMatches) -> Result<BTreeMap<String, String>> {
    let base = match m.get_one::<String>("config") {
        Some(p) => parse_config_text(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let mut overrides = Vec::new();
    for (k, _) in KEYS {
        if let Some(vals) = m.get_many::<String>(k) {
            for v in vals {
                overrides.push((k.to_string(), v.clone()));
            }
        }
    }
    merge_overrides(base, &overrides)
}

fn print_summary(out: &mut impl Write, label: &str, s: &RunSummary) -> Result<()> {
    write!(out, "{label}best validation loss {:.6} (se {:.2e})", s.best_val_loss, s.best_val_se)?;
    if let Some(c) = s.neg_log_c {
        write!(out, ", -log C {c:.6}")?;
    }
    if let (Some(m), Some(sd)) = (s.mean_rel_err, s.std_rel_err) {
        write!(out, ", mean error {m:.4}, std error {sd:.4}")?;
    }
    if let Some(d) = s.delta {
        write!(out, ", delta {d:.4}")?;
    }
    writeln!(out)?;
    Ok(())
}

/// Executes parsed arguments, printing a short report to `out`.
pub fn execute(matches: &ArgMatches, out: &mut impl Write) -> Result<()> {
    match matches.subcommand() {
        Some(("run", m)) => {
            let spec = RunSpec::resolve(&collect_keys(m)?)?;
            let dir = PathBuf::from(m.get_one::<String>("out").expect("required"));
            let s = run_experiment(&spec, &dir)?;
            print_summary(out, "", &s)
        }
        Some(("sweep", m)) => {
            let base = collect_keys(m)?;
            let param = m.get_one::<String>("param").expect("required");
            if base.contains_key(param) {
                return Err(Error::Config(format!("key `{param}` is both swept and fixed")));
            }
            let values: Vec<String> = m.get_many::<String>("values").expect("required").cloned().collect();
            let dir = PathBuf::from(m.get_one::<String>("out").expect("required"));
            for (v, s) in run_sweep(&base, param, &values, &dir)? {
                print_summary(out, &format!("{param}={v}: "), &s)?;
            }
            Ok(())
        }
        Some(("stats", m)) => {
            let r = stats_for_run(
                Path::new(m.get_one::<String>("run").expect("required")),
                *m.get_one::<usize>("count").expect("default"),
                *m.get_one::<u64>("seed").expect("default"),
                *m.get_one::<usize>("grid").expect("default"),
            )?;
            match m.get_one::<String>("out") {
                Some(p) => write_stats(&r, Path::new(p))?,
                None => r.write_csv(out)?,
            }
            writeln!(out, "mean error {:.6}, std error {:.6}", r.mean_rel_err, r.std_rel_err)?;
            Ok(())
        }
        Some(("dump", m)) => {
            let model = load_manifest(Path::new(m.get_one::<String>("manifest").expect("required")))?;
            dump_samples(
                &model,
                *m.get_one::<usize>("count").expect("default"),
                *m.get_one::<u64>("seed").expect("default"),
                Path::new(m.get_one::<String>("out").expect("required")),
            )
        }
        _ => Err(Error::Config("unknown command".into())),
    }
}

/// Process entry point: returns the exit status.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(&matches, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
