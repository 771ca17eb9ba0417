//! Time-conditioned MLP velocity fields `u(x, t)`, their parameters and the
//! binary checkpoint format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CAFM";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_SIGMA: &str = "log_sigma";

/// Tolerance on `t` outside `[0, 1]` before `velocity` refuses it.
const TIME_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    Tanh,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::config("activation", format!("unknown activation `{s}`"))),
        }
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.to_string()
    }
}

/// How `t` enters the network: as itself, or as `sin/cos(2^j * pi * t)` for
/// `j = 0..k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TimeEmbedding {
    Raw,
    Sinusoidal(usize),
}

impl TimeEmbedding {
    pub fn width(self) -> usize {
        match self {
            TimeEmbedding::Raw => 1,
            TimeEmbedding::Sinusoidal(k) => 2 * k,
        }
    }
}

impl fmt::Display for TimeEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeEmbedding::Raw => f.write_str("raw"),
            TimeEmbedding::Sinusoidal(k) => write!(f, "sinusoidal-{k}"),
        }
    }
}

impl FromStr for TimeEmbedding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "raw" {
            return Ok(TimeEmbedding::Raw);
        }
        s.strip_prefix("sinusoidal-")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(TimeEmbedding::Sinusoidal)
            .ok_or_else(|| Error::config("time_embedding", format!("unknown embedding `{s}`")))
    }
}

impl TryFrom<String> for TimeEmbedding {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TimeEmbedding> for String {
    fn from(e: TimeEmbedding) -> String {
        e.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_embedding")]
    pub time_embedding: TimeEmbedding,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_embedding() -> TimeEmbedding {
    TimeEmbedding::Sinusoidal(8)
}

impl MlpConfig {
    pub fn new(input_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden: default_hidden(),
            activation: default_activation(),
            time_embedding: default_embedding(),
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "needs at least one nonzero width"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim + self.time_embedding.width();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.input_dim));
        dims
    }

    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        format!(
            "input_dim={}\nhidden={}\nactivation={}\ntime_embedding={}\n",
            self.input_dim,
            hidden.join(","),
            self.activation,
            self.time_embedding
        )
    }
}

/// Ordered, named parameter tensors of one velocity network, optionally with
/// a per-step `log_sigma` table `[steps, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    config: MlpConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Xavier-uniform weights, zero biases; deterministic in `seed`.
    pub fn init(config: &MlpConfig, seed: u64) -> Result<ParamSet> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            names.push(format!("w{i}"));
            tensors.push(Tensor::from_parts(vec![fan_in, fan_out], w));
            names.push(format!("b{i}"));
            tensors.push(Tensor::zeros(&[fan_out]));
        }
        Ok(ParamSet {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Same layout, every entry zero.
    pub fn zeros(config: &MlpConfig) -> Result<ParamSet> {
        let mut p = ParamSet::init(config, 0)?;
        for t in &mut p.tensors {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn log_sigma(&self) -> Option<&Tensor> {
        self.get(LOG_SIGMA)
    }

    /// Appends a `log_sigma` table of `steps` rows, every entry `log(sigma0)`.
    pub fn with_log_sigma(mut self, steps: usize, sigma0: f64) -> Result<ParamSet> {
        if self.log_sigma().is_some() {
            return Err(Error::InvalidArgument("log_sigma already present".into()));
        }
        if steps == 0 || sigma0 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "log_sigma needs steps >= 1 and sigma0 > 0 (got {steps}, {sigma0})"
            )));
        }
        self.names.push(LOG_SIGMA.to_string());
        self.tensors
            .push(Tensor::full(&[steps, self.config.input_dim], sigma0.ln()));
        Ok(self)
    }

    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::shape(
                "replace",
                format!("{name}: {:?} vs {:?}", self.tensors[i].shape(), value.shape()),
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Fills a copy of this layout from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "unflatten",
                format!("expected {} values, got {}", self.num_params(), flat.len()),
            ));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let n = t.len();
            tensors.push(Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(ParamSet {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors,
        })
    }

    /// Registers every tensor as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams::new(
            self.config.clone(),
            self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            &self.names,
        )
    }

    /// Untracked view for inference or frozen use.
    pub fn constants(&self) -> BoundParams {
        BoundParams::new(
            self.config.clone(),
            self.tensors.iter().map(|t| Var::constant(t.clone())).collect(),
            &self.names,
        )
    }

    /// Deterministic inference: `u(x, t)` for a batch sharing one time.
    pub fn velocity_at(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let rows = x.rows();
        let tv = Var::constant(Tensor::full(&[rows], t));
        let v = self.constants().velocity(&tape, &Var::constant(x.clone()), &tv)?;
        Ok(v.value().clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamSet::from_bytes(&bytes)
    }

    /// Loads and checks the stored network layout against `expected`.
    pub fn load_expecting(path: &Path, expected: &MlpConfig) -> Result<ParamSet> {
        let p = ParamSet::load(path)?;
        if p.config != *expected {
            return Err(Error::ConfigMismatch {
                expected: expected.to_text().replace('\n', " "),
                found: p.config.to_text().replace('\n', " "),
            });
        }
        Ok(p)
    }

    /// Layout: magic `CAFM`, u32 version, u32 text length, UTF-8 config
    /// text, u64 value count, then that many f64. All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = self.config.to_text();
        if let Some(ls) = self.log_sigma() {
            text.push_str(&format!("log_sigma_steps={}\n", ls.rows()));
        }
        let flat = self.flatten();
        let mut out = Vec::with_capacity(24 + text.len() + 8 * flat.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(corrupt("magic", "not a CAFM checkpoint"));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(
                "version",
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let text_len = u32::from_le_bytes(r.take(4, "config_len")?.try_into().unwrap()) as usize;
        let text = std::str::from_utf8(r.take(text_len, "config_len")?)
            .map_err(|e| corrupt("config", e.to_string()))?;
        let (config, sigma_steps) = parse_config_text(text)?;
        let count = u64::from_le_bytes(r.take(8, "data_len")?.try_into().unwrap()) as usize;
        let mut layout = ParamSet::zeros(&config)?;
        if let Some(steps) = sigma_steps {
            layout = layout.with_log_sigma(steps, 1.0)?;
        }
        if count != layout.num_params() {
            return Err(corrupt(
                "data_len",
                format!("header says {count} values, config implies {}", layout.num_params()),
            ));
        }
        let raw = r.take(count * 8, "data_len")?;
        if r.pos != bytes.len() {
            return Err(corrupt("data_len", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        layout
            .unflatten(&flat)
            .map_err(|e| corrupt("data", e.to_string()))
    }
}

fn corrupt(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        field,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn parse_config_text(text: &str) -> Result<(MlpConfig, Option<usize>)> {
    let mut input_dim = None;
    let mut hidden = None;
    let mut activation = None;
    let mut embedding = None;
    let mut sigma_steps = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt("config", format!("bad line `{line}`")))?;
        let bad = |e: &dyn fmt::Display| corrupt("config", format!("{k}: {e}"));
        match k {
            "input_dim" => input_dim = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
            "hidden" => {
                hidden = Some(
                    v.split(',')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(&e))?,
                )
            }
            "activation" => activation = Some(v.parse::<Activation>().map_err(|e| bad(&e))?),
            "time_embedding" => embedding = Some(v.parse::<TimeEmbedding>().map_err(|e| bad(&e))?),
            "log_sigma_steps" => sigma_steps = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
            _ => return Err(corrupt("config", format!("unknown key `{k}`"))),
        }
    }
    let config = MlpConfig {
        input_dim: input_dim.ok_or_else(|| corrupt("config", "missing input_dim"))?,
        hidden: hidden.ok_or_else(|| corrupt("config", "missing hidden"))?,
        activation: activation.ok_or_else(|| corrupt("config", "missing activation"))?,
        time_embedding: embedding.ok_or_else(|| corrupt("config", "missing time_embedding"))?,
    };
    config.validate().map_err(|e| corrupt("config", e.to_string()))?;
    Ok((config, sigma_steps))
}

/// Parameters as tape variables (tracked leaves or constants).
#[derive(Clone, Debug)]
pub struct BoundParams {
    config: MlpConfig,
    layers: Vec<Var>,
    log_sigma: Option<Var>,
}

impl BoundParams {
    fn new(config: MlpConfig, vars: Vec<Var>, names: &[String]) -> BoundParams {
        let mut layers = Vec::new();
        let mut log_sigma = None;
        for (v, n) in vars.into_iter().zip(names) {
            if n == LOG_SIGMA {
                log_sigma = Some(v);
            } else {
                layers.push(v);
            }
        }
        BoundParams {
            config,
            layers,
            log_sigma,
        }
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn log_sigma(&self) -> Option<&Var> {
        self.log_sigma.as_ref()
    }

    pub fn detached(&self) -> BoundParams {
        BoundParams {
            config: self.config.clone(),
            layers: self.layers.iter().map(Var::detach).collect(),
            log_sigma: self.log_sigma.as_ref().map(Var::detach),
        }
    }

    /// Gradients in `ParamSet` order; entries never reached are zero.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.layers
            .iter()
            .chain(self.log_sigma.iter())
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }

    /// `u(x, t)` for `x: [B, d]`, `t: [B]`: the concatenation of `x` and the
    /// time embedding passed through the MLP. Differentiable in the
    /// parameters, `x` and `t`.
    pub fn velocity(&self, tape: &Tape, x: &Var, t: &Var) -> Result<Var> {
        let d = self.config.input_dim;
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != d {
            return Err(Error::shape("velocity", format!("x {xs:?} for input_dim {d}")));
        }
        let b = xs[0];
        if t.shape() != [b] {
            return Err(Error::shape(
                "velocity",
                format!("t {:?} for batch {b}", t.shape()),
            ));
        }
        if let Some(tv) = t
            .value()
            .data()
            .iter()
            .find(|&&tv| !(-TIME_SLACK..=1.0 + TIME_SLACK).contains(&tv))
        {
            return Err(Error::InvalidArgument(format!("velocity: t = {tv} outside [0, 1]")));
        }
        let t_col = tape.reshape(t, vec![b, 1])?;
        let mut h = match self.config.time_embedding {
            TimeEmbedding::Raw => tape.concat(&[x, &t_col])?,
            TimeEmbedding::Sinusoidal(k) => {
                let freqs: Vec<f64> = (0..k)
                    .map(|j| f64::from(1u32 << j) * std::f64::consts::PI)
                    .collect();
                let freqs = Var::constant(Tensor::from_parts(vec![1, k], freqs));
                let arg = tape.matmul(&t_col, &freqs)?;
                let s = tape.sin(&arg)?;
                let c = tape.cos(&arg)?;
                tape.concat(&[x, &s, &c])?
            }
        };
        let n_layers = self.layers.len() / 2;
        for i in 0..n_layers {
            h = tape.affine(&h, &self.layers[2 * i], &self.layers[2 * i + 1])?;
            if i + 1 < n_layers {
                h = match self.config.activation {
                    Activation::Tanh => tape.tanh(&h)?,
                    Activation::Relu => tape.relu(&h)?,
                };
            }
        }
        Ok(h)
    }
}
