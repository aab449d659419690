//! Plain-text model manifest.
//!
//! Layout, one record per line:
//!
//! ```text
//! vaekrnet-manifest 1
//! model krnet|vae-krnet|mean-field
//! <architecture records>
//! param <label> <dim>x<dim>.. <values...>
//! ...
//! init <0|1 per scale-bias layer>
//! end
//! ```
//!
//! Architecture records are `flow <role> n=.. schedule=a,b,.. depth=.. hidden=.. rotation=0|1 nonlinear=0|1`,
//! `head <role> widths=a,b,..` and `dim <n>`. Parameters appear in the model's declaration order.
//! Values use the shortest decimal form that parses back to the same `f64`, so a round trip is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::krnet::{KRnetConfig, KRnetModel};
use crate::numerics::{seeded_rng, Parameterized, Tensor};
use crate::vae::GaussHead;
use crate::vae_krnet::VaeKrnetModel;
use crate::vb::MeanFieldModel;

const MAGIC: &str = "vaekrnet-manifest 1";

/// Any model the CLI can train and persist.
#[derive(Debug, Clone)]
pub enum SavedModel {
    Krnet(KRnetModel),
    VaeKrnet(VaeKrnetModel),
    MeanField(MeanFieldModel),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Krnet(_) => "krnet",
            SavedModel::VaeKrnet(_) => "vae-krnet",
            SavedModel::MeanField(_) => "mean-field",
        }
    }

    fn params(&self) -> Vec<&crate::numerics::Param> {
        match self {
            SavedModel::Krnet(m) => m.params(),
            SavedModel::VaeKrnet(m) => m.params(),
            SavedModel::MeanField(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut crate::numerics::Param> {
        match self {
            SavedModel::Krnet(m) => m.params_mut(),
            SavedModel::VaeKrnet(m) => m.params_mut(),
            SavedModel::MeanField(m) => m.params_mut(),
        }
    }

    fn flows(&self) -> Vec<&KRnetModel> {
        match self {
            SavedModel::Krnet(m) => vec![m],
            SavedModel::VaeKrnet(m) => m.prior_flow.iter().chain(&m.encoder_flow).collect(),
            SavedModel::MeanField(_) => Vec::new(),
        }
    }

    fn flows_mut(&mut self) -> Vec<&mut KRnetModel> {
        match self {
            SavedModel::Krnet(m) => vec![m],
            SavedModel::VaeKrnet(m) => m.prior_flow.iter_mut().chain(m.encoder_flow.iter_mut()).collect(),
            SavedModel::MeanField(_) => Vec::new(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn flow_record(role: &str, c: &KRnetConfig) -> String {
    format!(
        "flow {role} n={} schedule={} depth={} hidden={} rotation={} nonlinear={}",
        c.n,
        join(&c.schedule),
        c.depth,
        c.hidden,
        c.rotation as u8,
        c.nonlinear as u8
    )
}

fn flow_labels(prefix: &str, m: &KRnetModel, out: &mut Vec<String>) {
    for (s, stage) in m.stages.iter().enumerate() {
        if let Some(r) = &stage.rotation {
            out.extend(["l", "u"].iter().take(r.params().len()).map(|p| format!("{prefix}stage{s}.rotation.{p}")));
        }
        for (b, block) in stage.blocks.iter().enumerate() {
            out.push(format!("{prefix}stage{s}.block{b}.scale_bias.a"));
            out.push(format!("{prefix}stage{s}.block{b}.scale_bias.b"));
            let n = block.coupling.params().len();
            out.extend((0..n - 1).map(|i| format!("{prefix}stage{s}.block{b}.coupling.net{i}")));
            out.push(format!("{prefix}stage{s}.block{b}.coupling.beta"));
        }
        if stage.nonlinear.is_some() {
            out.push(format!("{prefix}stage{s}.nonlinear.theta"));
        }
    }
    if m.last.is_some() {
        out.push(format!("{prefix}last.nonlinear.theta"));
    }
}

fn labels(model: &SavedModel) -> Vec<String> {
    let mut out = Vec::new();
    match model {
        SavedModel::Krnet(m) => flow_labels("", m, &mut out),
        SavedModel::MeanField(_) => out.extend(["mean".to_string(), "log_std".to_string()]),
        SavedModel::VaeKrnet(m) => {
            out.extend((0..m.encoder.params().len()).map(|i| format!("encoder.net{i}")));
            out.extend((0..m.decoder.params().len()).map(|i| format!("decoder.net{i}")));
            if let Some(f) = &m.prior_flow {
                flow_labels("prior_flow.", f, &mut out);
            }
            if let Some(f) = &m.encoder_flow {
                flow_labels("encoder_flow.", f, &mut out);
            }
        }
    }
    out
}

/// Serializes a model to manifest text.
pub fn to_manifest(model: &SavedModel) -> String {
    let mut s = format!("{MAGIC}\nmodel {}\n", model.kind());
    match model {
        SavedModel::Krnet(m) => s.push_str(&flow_record("main", m.config())),
        SavedModel::MeanField(m) => {
            let _ = write!(s, "dim {}", m.mean().len());
        }
        SavedModel::VaeKrnet(m) => {
            let _ = write!(s, "head encoder widths={}\n", join(m.encoder.widths()));
            let _ = write!(s, "head decoder widths={}", join(m.decoder.widths()));
            if let Some(f) = &m.prior_flow {
                s.push('\n');
                s.push_str(&flow_record("prior", f.config()));
            }
            if let Some(f) = &m.encoder_flow {
                s.push('\n');
                s.push_str(&flow_record("encoder", f.config()));
            }
        }
    }
    s.push('\n');
    for (label, p) in labels(model).iter().zip(model.params()) {
        let shape = p.value.shape().iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        let _ = write!(s, "param {label} {}", if shape.is_empty() { "scalar".into() } else { shape });
        for v in p.value.data() {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    let flags: Vec<&str> = model
        .flows()
        .iter()
        .flat_map(|f| f.stages.iter().flat_map(|st| st.blocks.iter()))
        .map(|b| if b.scale_bias.is_initialized() { "1" } else { "0" })
        .collect();
    let _ = writeln!(s, "init {}", flags.join(" "));
    s.push_str("end\n");
    s
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

fn kv<'a>(fields: &[&'a str], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| bad(format!("missing field `{key}`")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(format!("`{s}` is not a non-negative integer")))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(parse_usize).collect()
}

fn parse_flag(s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(bad(format!("flag must be 0 or 1, got `{s}`"))),
    }
}

fn parse_flow(fields: &[&str]) -> Result<KRnetConfig> {
    let cfg = KRnetConfig::with_schedule(
        parse_usize(kv(fields, "n")?)?,
        parse_list(kv(fields, "schedule")?)?,
        parse_usize(kv(fields, "depth")?)?,
        parse_usize(kv(fields, "hidden")?)?,
    )?;
    Ok(cfg.with_rotation(parse_flag(kv(fields, "rotation")?)?).with_nonlinear(parse_flag(kv(fields, "nonlinear")?)?))
}

fn head_from_widths(widths: &[usize]) -> Result<GaussHead> {
    if widths.len() < 2 || widths[widths.len() - 1] % 2 != 0 {
        return Err(bad(format!("head widths {widths:?} must end in an even output layer")));
    }
    let hidden = &widths[1..widths.len() - 1];
    let width = hidden.first().copied().unwrap_or(1);
    if hidden.iter().any(|&w| w != width) {
        return Err(bad(format!("head widths {widths:?} must have equal hidden layers")));
    }
    GaussHead::new(widths[0], widths[widths.len() - 1] / 2, hidden.len(), width, &mut seeded_rng(0))
}

/// Rebuilds a model from manifest text.
pub fn from_manifest(text: &str) -> Result<SavedModel> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("first line must be `{MAGIC}`")));
    }
    let kind = lines.next().and_then(|l| l.strip_prefix("model ")).ok_or_else(|| bad("missing `model` line"))?;
    let mut rng = seeded_rng(0);
    let mut arch: Vec<Vec<&str>> = Vec::new();
    let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut init: Option<Vec<bool>> = None;
    let mut ended = false;
    for line in lines.by_ref() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "flow" | "head" | "dim" => arch.push(fields),
            "param" => {
                if fields.len() < 3 {
                    return Err(bad(format!("truncated param record `{line}`")));
                }
                let shape = if fields[2] == "scalar" {
                    Vec::new()
                } else {
                    fields[2].split('x').map(parse_usize).collect::<Result<_>>()?
                };
                let values = fields[3..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}` in {}", fields[1]))))
                    .collect::<Result<Vec<_>>>()?;
                params.push((fields[1].to_string(), shape, values));
            }
            "init" => init = Some(fields[1..].iter().map(|f| parse_flag(f)).collect::<Result<_>>()?),
            "end" => {
                ended = true;
                break;
            }
            other => return Err(bad(format!("unknown record `{other}`"))),
        }
    }
    if !ended {
        return Err(bad("missing `end` line; file truncated?"));
    }
    if let Some(extra) = lines.next() {
        return Err(bad(format!("unexpected content after `end`: `{extra}`")));
    }
    let find = |tag: &str, role: &str| arch.iter().find(|f| f[0] == tag && f.get(1) == Some(&role));
    let mut model = match kind {
        "krnet" => {
            let f = find("flow", "main").ok_or_else(|| bad("missing `flow main` record"))?;
            SavedModel::Krnet(KRnetModel::new(parse_flow(&f[2..])?, &mut rng)?)
        }
        "mean-field" => {
            let f = arch.iter().find(|f| f[0] == "dim").ok_or_else(|| bad("missing `dim` record"))?;
            let n = parse_usize(f.get(1).ok_or_else(|| bad("`dim` needs a value"))?)?;
            SavedModel::MeanField(MeanFieldModel::new(n))
        }
        "vae-krnet" => {
            let head = |role: &str| -> Result<GaussHead> {
                let f = find("head", role).ok_or_else(|| bad(format!("missing `head {role}` record")))?;
                head_from_widths(&parse_list(kv(&f[2..], "widths")?)?)
            };
            let mut flow = |role: &str| -> Result<Option<KRnetModel>> {
                find("flow", role).map(|f| KRnetModel::new(parse_flow(&f[2..])?, &mut rng)).transpose()
            };
            let (pf, ef) = (flow("prior")?, flow("encoder")?);
            SavedModel::VaeKrnet(VaeKrnetModel::from_parts(head("encoder")?, head("decoder")?, pf, ef)?)
        }
        other => return Err(bad(format!("unknown model kind `{other}`"))),
    };
    let expected = labels(&model);
    if expected.len() != params.len() {
        return Err(bad(format!("architecture has {} parameter tensors, file has {}", expected.len(), params.len())));
    }
    for ((slot, label), (name, shape, values)) in model.params_mut().into_iter().zip(&expected).zip(params) {
        if *label != name || slot.value.shape() != shape.as_slice() {
            return Err(bad(format!(
                "parameter `{name}` {shape:?} does not match `{label}` {:?}",
                slot.value.shape()
            )));
        }
        slot.value = Tensor::new(&shape, values).map_err(|e| bad(format!("parameter `{name}`: {e}")))?;
    }
    let flags = init.ok_or_else(|| bad("missing `init` record"))?;
    let mut layers: Vec<_> = model
        .flows_mut()
        .into_iter()
        .flat_map(|f| f.stages.iter_mut().flat_map(|st| st.blocks.iter_mut()))
        .collect();
    if layers.len() != flags.len() {
        return Err(bad(format!("{} scale-bias layers but {} init flags", layers.len(), flags.len())));
    }
    for (b, flag) in layers.iter_mut().zip(flags) {
        b.scale_bias.set_initialized(flag);
    }
    Ok(model)
}

pub fn save_manifest(model: &SavedModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_manifest(model))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<SavedModel> {
    from_manifest(&std::fs::read_to_string(path)?)
}
