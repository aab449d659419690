//! KRnet: a block-triangular normalizing flow.
//!
//! The schedule `c_1 = n > c_2 > ... > c_K` lists how many dimensions stay
//! active. Stage `k` (for `k < K`) acts on the first `c_k` columns:
//! optional rotation, `L` blocks of scale-bias plus affine coupling with
//! alternating parity, an optional nonlinear layer on the columns about to
//! be frozen, then a squeeze that freezes columns `[c_{k+1}, c_k)`. Frozen
//! columns are never touched again. A final optional nonlinear layer acts on
//! the last `c_K` columns. With a single-entry schedule the model is one
//! stage without a squeeze.
//!
//! Columns keep their positions, so the output is laid out as
//! `(last active block, block frozen at stage K-1, ..., block frozen at stage 1)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow_layers::{AffineCoupling, NonlinearInvertible, RotationLU, ScaleBias};
use crate::numerics::{gauss_sample, std_normal_logpdf, Graph, Param, Parameterized, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct KRnetConfig {
    pub n: usize,
    /// Active counts per block, strictly decreasing from `n`.
    pub schedule: Vec<usize>,
    /// Inner depth `L`: scale-bias/coupling pairs per stage.
    pub depth: usize,
    /// Hidden width `N_L` of the coupling networks.
    pub hidden: usize,
    pub rotation: bool,
    pub nonlinear: bool,
}

impl KRnetConfig {
    /// Drops `step` dimensions per stage, with at most `max_blocks` blocks.
    ///
    /// `stepped(10, 2, 5)` gives counts 10, 8, 6, 4, 2.
    pub fn stepped(n: usize, step: usize, max_blocks: usize, depth: usize, hidden: usize) -> Result<Self> {
        if n == 0 || step == 0 || max_blocks == 0 {
            return Err(Error::Config("dimension, step and block count must be positive".into()));
        }
        let mut schedule = vec![n];
        while schedule.len() < max_blocks {
            let last = *schedule.last().unwrap();
            if last <= step {
                break;
            }
            schedule.push(last - step);
        }
        Self::with_schedule(n, schedule, depth, hidden)
    }

    /// Drops one dimension per stage: counts `n, n-1, ..., n-K+1`.
    pub fn one_by_one(n: usize, blocks: usize, depth: usize, hidden: usize) -> Result<Self> {
        if blocks == 0 || blocks > n {
            return Err(Error::Config(format!("block count {blocks} must lie in 1..={n}")));
        }
        Self::with_schedule(n, (0..blocks).map(|i| n - i).collect(), depth, hidden)
    }

    pub fn with_schedule(n: usize, schedule: Vec<usize>, depth: usize, hidden: usize) -> Result<Self> {
        let cfg = Self { n, schedule, depth, hidden, rotation: false, nonlinear: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_rotation(mut self, on: bool) -> Self {
        self.rotation = on;
        self
    }

    pub fn with_nonlinear(mut self, on: bool) -> Self {
        self.nonlinear = on;
        self
    }

    /// Block count `K`.
    pub fn blocks(&self) -> usize {
        self.schedule.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if self.n == 0 {
            return Err(Error::Config("flow dimension must be positive".into()));
        }
        if s.first() != Some(&self.n) {
            return Err(Error::Config(format!("schedule {s:?} must start at n = {}", self.n)));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) || s.last() == Some(&0) {
            return Err(Error::Config(format!("schedule {s:?} must be strictly decreasing and stay positive")));
        }
        if self.depth == 0 || self.hidden == 0 {
            return Err(Error::Config("depth L and width N_L must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub(crate) scale_bias: ScaleBias,
    pub(crate) coupling: AffineCoupling,
}

#[derive(Debug, Clone)]
pub(crate) struct Stage {
    /// columns acted on
    pub(crate) active: usize,
    /// columns still active after the squeeze; equals `active` without one
    pub(crate) keep: usize,
    pub(crate) rotation: Option<RotationLU>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) nonlinear: Option<NonlinearInvertible>,
}

#[derive(Debug, Clone)]
pub struct KRnetModel {
    config: KRnetConfig,
    pub(crate) stages: Vec<Stage>,
    pub(crate) last: Option<NonlinearInvertible>,
}

impl KRnetModel {
    /// Near-identity model: zeroed coupling heads, identity rotations, uniform
    /// nonlinear densities. Scale-bias layers wait for data.
    pub fn new(config: KRnetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let s = &config.schedule;
        let stage_specs: Vec<(usize, usize)> =
            if s.len() == 1 { vec![(s[0], s[0])] } else { s.windows(2).map(|w| (w[0], w[1])).collect() };
        let mut stages = Vec::new();
        for (active, keep) in stage_specs {
            let mut blocks = Vec::new();
            for i in 0..config.depth {
                blocks.push(Block {
                    scale_bias: ScaleBias::new(active),
                    coupling: AffineCoupling::new(active, (i % 2) as u8, config.hidden, rng)?,
                });
            }
            stages.push(Stage {
                active,
                keep,
                rotation: config.rotation.then(|| RotationLU::identity(active)),
                blocks,
                nonlinear: (config.nonlinear && keep < active).then(|| NonlinearInvertible::new(active - keep)),
            });
        }
        let last = config.nonlinear.then(|| NonlinearInvertible::new(*s.last().unwrap()));
        Ok(Self { config, stages, last })
    }

    pub fn config(&self) -> &KRnetConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.n
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Columns each stage acts on.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.active).collect()
    }

    pub fn is_initialized(&self) -> bool {
        self.scale_bias_layers().all(ScaleBias::is_initialized)
    }

    pub(crate) fn scale_bias_layers(&self) -> impl Iterator<Item = &ScaleBias> {
        self.stages.iter().flat_map(|s| s.blocks.iter().map(|b| &b.scale_bias))
    }

    pub(crate) fn scale_bias_layers_mut(&mut self) -> impl Iterator<Item = &mut ScaleBias> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut().map(|b| &mut b.scale_bias))
    }

    /// Accepts identity scale-bias parameters without data, e.g. for flows
    /// over a latent space or a variational family.
    pub fn mark_identity_initialized(&mut self) {
        self.scale_bias_layers_mut().for_each(ScaleBias::mark_initialized);
    }

    /// Data-dependent initialization: each uninitialized scale-bias layer is
    /// fitted to the batch as it arrives at that layer.
    pub fn initialize_from_data(&mut self, batch: &Tensor) -> Result<()> {
        check_cols(batch.cols(), self.dim())?;
        let g = Graph::no_grad();
        let mut h = batch.clone();
        for stage in &mut self.stages {
            let mut cur = g.constant(h.slice_cols(0, stage.active));
            if let Some(r) = &stage.rotation {
                cur = r.forward(&g, &cur)?.0;
            }
            for block in &mut stage.blocks {
                if !block.scale_bias.is_initialized() {
                    block.scale_bias.init_from_data(cur.value())?;
                }
                cur = block.scale_bias.forward(&g, &cur)?.0;
                cur = block.coupling.forward(&g, &cur)?.0;
            }
            h = cur.value().slice_cols(0, stage.keep);
        }
        Ok(())
    }

    /// `(z, log|det df/dy|)` for a batch `[M, n]`.
    pub fn forward(&self, g: &Graph, y: &Var) -> Result<(Var, Var)> {
        self.forward_from_stage(g, y, 0)
    }

    /// Runs stages `from..` on a state whose columns beyond the active width
    /// of stage `from` are already frozen.
    pub fn forward_from_stage(&self, g: &Graph, y: &Var, from: usize) -> Result<(Var, Var)> {
        check_batch(y, self.dim())?;
        if from > self.stages.len() {
            return Err(Error::Config(format!("stage {from} out of range")));
        }
        let rows = y.rows();
        let mut ld = g.constant(Tensor::zeros(&[rows]));
        let start = self.stages.get(from).map_or_else(|| *self.config.schedule.last().unwrap(), |s| s.active);
        let mut frozen: Vec<Var> = Vec::new();
        if start < self.dim() {
            frozen.push(y.slice_cols(start, self.dim()));
        }
        let mut cur = if start < self.dim() { y.slice_cols(0, start) } else { y.clone() };
        for stage in &self.stages[from..] {
            if let Some(r) = &stage.rotation {
                let (z, d) = r.forward(g, &cur)?;
                cur = z;
                ld = ld.add(&d);
            }
            for block in &stage.blocks {
                let (z, d) = block.scale_bias.forward(g, &cur)?;
                ld = ld.add(&d);
                let (z, d) = block.coupling.forward(g, &z)?;
                ld = ld.add(&d);
                cur = z;
            }
            if stage.keep < stage.active {
                let mut drop = cur.slice_cols(stage.keep, stage.active);
                if let Some(nl) = &stage.nonlinear {
                    let (z, d) = nl.forward(g, &drop)?;
                    drop = z;
                    ld = ld.add(&d);
                }
                frozen.push(drop);
                cur = cur.slice_cols(0, stage.keep);
            }
        }
        if let Some(nl) = &self.last {
            let (z, d) = nl.forward(g, &cur)?;
            cur = z;
            ld = ld.add(&d);
        }
        if frozen.is_empty() {
            return Ok((cur, ld));
        }
        let mut parts = vec![&cur];
        parts.extend(frozen.iter().rev());
        Ok((Var::concat_cols(&parts), ld))
    }

    /// `(y, log|det df^-1/dz|)` for a batch `[M, n]`.
    pub fn inverse(&self, g: &Graph, z: &Var) -> Result<(Var, Var)> {
        check_batch(z, self.dim())?;
        let rows = z.rows();
        let n = self.dim();
        let mut ld = g.constant(Tensor::zeros(&[rows]));
        let last_width = *self.config.schedule.last().unwrap();
        let mut cur = if last_width < n { z.slice_cols(0, last_width) } else { z.clone() };
        if let Some(nl) = &self.last {
            let (y, d) = nl.inverse(g, &cur)?;
            cur = y;
            ld = ld.add(&d);
        }
        for stage in self.stages.iter().rev() {
            if stage.keep < stage.active {
                let mut drop = z.slice_cols(stage.keep, stage.active);
                if let Some(nl) = &stage.nonlinear {
                    let (y, d) = nl.inverse(g, &drop)?;
                    drop = y;
                    ld = ld.add(&d);
                }
                cur = Var::concat_cols(&[&cur, &drop]);
            }
            for block in stage.blocks.iter().rev() {
                let (y, d) = block.coupling.inverse(g, &cur)?;
                ld = ld.add(&d);
                let (y, d) = block.scale_bias.inverse(g, &y)?;
                ld = ld.add(&d);
                cur = y;
            }
            if let Some(r) = &stage.rotation {
                let (y, d) = r.inverse(g, &cur)?;
                cur = y;
                ld = ld.add(&d);
            }
        }
        Ok((cur, ld))
    }

    /// `log N(f(y); 0, I) + log|det df/dy|`, one value per row.
    pub fn log_pdf(&self, g: &Graph, y: &Var) -> Result<Var> {
        let (z, ld) = self.forward(g, y)?;
        let lp = std_normal_logpdf(&z).add(&ld);
        if !lp.value().all_finite() {
            return Err(Error::NonFinite("log density of the flow".into()));
        }
        Ok(lp)
    }

    /// Log density of each row of `y`, without recording.
    pub fn log_pdf_batch(&self, y: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::no_grad();
        Ok(self.log_pdf(&g, &g.constant(y.clone()))?.data().to_vec())
    }

    /// `count` draws `f^-1(z)` with `z ~ N(0, I)`.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let z = gauss_sample(rng, count, self.dim());
        if count == 0 {
            return Ok(z);
        }
        let g = Graph::no_grad();
        Ok(self.inverse(&g, &g.constant(z))?.0.value().clone())
    }

    /// Forward map of a single point.
    pub fn forward_vec(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_cols(y.len(), self.dim())?;
        let g = Graph::no_grad();
        let (z, ld) = self.forward(&g, &g.constant(Tensor::matrix(1, y.len(), y.to_vec())?))?;
        Ok((z.data().to_vec(), ld.data()[0]))
    }

    /// Inverse map of a single point.
    pub fn inverse_vec(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_cols(z.len(), self.dim())?;
        let g = Graph::no_grad();
        let (y, _) = self.inverse(&g, &g.constant(Tensor::matrix(1, z.len(), z.to_vec())?))?;
        Ok(y.data().to_vec())
    }
}

impl Parameterized for KRnetModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for s in &self.stages {
            if let Some(r) = &s.rotation {
                out.extend(r.params());
            }
            for b in &s.blocks {
                out.extend(b.scale_bias.params());
                out.extend(b.coupling.params());
            }
            if let Some(nl) = &s.nonlinear {
                out.extend(nl.params());
            }
        }
        if let Some(nl) = &self.last {
            out.extend(nl.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            if let Some(r) = &mut s.rotation {
                out.extend(r.params_mut());
            }
            for b in &mut s.blocks {
                out.extend(b.scale_bias.params_mut());
                out.extend(b.coupling.params_mut());
            }
            if let Some(nl) = &mut s.nonlinear {
                out.extend(nl.params_mut());
            }
        }
        if let Some(nl) = &mut self.last {
            out.extend(nl.params_mut());
        }
        out
    }
}

fn check_cols(got: usize, n: usize) -> Result<()> {
    if got != n {
        return Err(Error::Shape(format!("flow over R^{n} received {got} columns")));
    }
    Ok(())
}

fn check_batch(y: &Var, n: usize) -> Result<()> {
    if y.shape().len() != 2 {
        return Err(Error::Shape(format!("flow expects a [M, {n}] batch, got {:?}", y.shape())));
    }
    check_cols(y.cols(), n)
}
