//! Experiment configuration files.
//!
//! A config is TOML with flat sections `[experiment]`, `[train]`, `[model]`,
//! `[eval]` and optionally `[sweep]`. Unset `[train]` keys take the task's
//! defaults. [`ExperimentConfig::to_toml`] writes every key, so the resolved
//! text reproduces the run on its own.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, ExternalOracle};
use crate::error::{Error, Result};
use crate::metrics::SwdSettings;
use crate::model::{Activation, MlpConfig, TimeEmbedding};
use crate::targets::Target;
use crate::training::TrainConfig;

macro_rules! string_enum {
    ($name:ident, $field:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => {
                        let known: Vec<&str> = vec![$($text),+];
                        Err(Error::config($field, format!("unknown value `{s}` (expected one of {})", known.join(", "))))
                    }
                }
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }
    };
}

string_enum!(Task, "experiment.task", {
    Box => "box",
    TwoBoxes => "two_boxes",
    Ball8 => "ball8",
    Ball20 => "ball20",
    Subspace => "subspace",
    CustomOracle => "custom_oracle",
});

string_enum!(Method, "experiment.method", {
    Fm => "fm",
    FmDd => "fm_dd",
    FmRe => "fm_re",
});

impl Task {
    /// The built-in target for this task; `custom_oracle` trains on `data`.
    pub fn target(self, data: Task) -> Result<Target> {
        Ok(match self {
            Task::Box => Target::BoxGmm,
            Task::TwoBoxes => Target::TwoBoxes,
            Task::Ball8 => Target::BallGmm(8),
            Task::Ball20 => Target::BallGmm(20),
            Task::Subspace => Target::Subspace,
            Task::CustomOracle => {
                if data == Task::CustomOracle {
                    return Err(Error::config(
                        "experiment.oracle_data",
                        "must name a built-in task",
                    ));
                }
                return data.target(data);
            }
        })
    }

    /// Per-task defaults for `lambda`, `steps` and `n2`.
    pub fn train_defaults(self) -> TrainConfig {
        let (lambda, steps, n2) = match self {
            Task::Box | Task::TwoBoxes | Task::CustomOracle => (80.0, 75, 15),
            Task::Ball8 | Task::Ball20 => (20.0, 75, 15),
            Task::Subspace => (1.0, 70, 10),
        };
        TrainConfig {
            lambda,
            steps,
            n2,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub task: Task,
    pub method: Method,
    /// Output directory for artifacts.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Start FM-DD from the trained FM model instead of a fresh init.
    #[serde(default = "yes")]
    pub fmdd_warm_start: bool,
    /// Shell command of the membership oracle (`custom_oracle` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_cmd: Option<String>,
    /// Built-in task supplying training data and reference samples for
    /// `custom_oracle`.
    #[serde(default = "default_oracle_data")]
    pub oracle_data: Task,
    #[serde(default = "default_oracle_timeout")]
    pub oracle_timeout_ms: u64,
    #[serde(default = "default_oracle_attempts")]
    pub oracle_attempts: u32,
}

fn default_out() -> PathBuf {
    PathBuf::from("cafm-out")
}

fn yes() -> bool {
    true
}

fn default_oracle_data() -> Task {
    Task::Box
}

fn default_oracle_timeout() -> u64 {
    10_000
}

fn default_oracle_attempts() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = MlpConfig::new(1);
        ModelSection {
            hidden: m.hidden,
            activation: m.activation,
            time_embedding: m.time_embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    /// Samples per trial; also the size of the reference set.
    pub n: usize,
    pub projections: usize,
    pub p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 10,
            n: 2000,
            projections: 256,
            p: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn swd(&self) -> SwdSettings {
        SwdSettings {
            projections: self.projections,
            p: self.p,
        }
    }
}

/// Sweep axes. Present axes combine as a Cartesian product, or pairwise
/// when `paired` (all axes then need equal length).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub paired: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n2: Option<Vec<usize>>,
}

/// One point of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepSetting {
    pub lambda: Option<f64>,
    pub t0: Option<f64>,
    pub n2: Option<usize>,
}

impl SweepSetting {
    /// Applies the setting to `train`, checking that a paired `t0` and `n2`
    /// agree on the grid.
    pub fn apply(&self, train: &mut TrainConfig) -> Result<()> {
        if let Some(l) = self.lambda {
            train.lambda = l;
        }
        if let Some(n2) = self.n2 {
            train.n2 = n2;
        }
        if let Some(t0) = self.t0 {
            let mut probe = train.clone();
            probe.set_t0(t0).map_err(|e| Error::config("sweep.t0", e.to_string()))?;
            if self.n2.is_some() && probe.n2 != train.n2 {
                return Err(Error::config(
                    "sweep",
                    format!("t0 = {t0} and n2 = {} disagree for steps = {}", train.n2, train.steps),
                ));
            }
            train.n2 = probe.n2;
        }
        train.validate()
    }
}

impl SweepSpec {
    pub fn settings(&self) -> Result<Vec<SweepSetting>> {
        let axes: Vec<(&str, usize)> = [
            ("lambda", self.lambda.as_ref().map(Vec::len)),
            ("t0", self.t0.as_ref().map(Vec::len)),
            ("n2", self.n2.as_ref().map(Vec::len)),
        ]
        .into_iter()
        .filter_map(|(k, n)| n.map(|n| (k, n)))
        .collect();
        if axes.is_empty() || axes.iter().any(|&(_, n)| n == 0) {
            return Err(Error::config("sweep", "empty sweep"));
        }
        let get = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map(|v| v[i]);
        let get_n = |v: &Option<Vec<usize>>, i: usize| v.as_ref().map(|v| v[i]);
        if self.paired {
            let n = axes[0].1;
            if let Some((k, m)) = axes.iter().find(|&&(_, m)| m != n) {
                return Err(Error::config(
                    "sweep",
                    format!("paired axes need equal lengths ({} has {n}, {k} has {m})", axes[0].0),
                ));
            }
            return Ok((0..n)
                .map(|i| SweepSetting {
                    lambda: get(&self.lambda, i),
                    t0: get(&self.t0, i),
                    n2: get_n(&self.n2, i),
                })
                .collect());
        }
        let len = |n: Option<usize>| n.unwrap_or(1);
        let (a, b, c) = (
            len(self.lambda.as_ref().map(Vec::len)),
            len(self.t0.as_ref().map(Vec::len)),
            len(self.n2.as_ref().map(Vec::len)),
        );
        let mut out = Vec::with_capacity(a * b * c);
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out.push(SweepSetting {
                        lambda: get(&self.lambda, i),
                        t0: get(&self.t0, j),
                        n2: get_n(&self.n2, k),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub train: TrainConfig,
    pub model: ModelSection,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn toml_err(field: &str, e: impl fmt::Display) -> Error {
    Error::config(field, e.to_string().trim().to_string())
}

/// Overlays the user's `[train]` keys on the task defaults. A `t0` key is
/// converted to `n2`.
fn resolve_train(task: Task, user: Option<&toml::Value>) -> Result<TrainConfig> {
    let mut base = toml::Value::try_from(task.train_defaults()).map_err(|e| toml_err("train", e))?;
    let mut t0 = None;
    if let Some(user) = user {
        let user = user
            .as_table()
            .ok_or_else(|| Error::config("train", "must be a table"))?;
        let table = base.as_table_mut().expect("struct serializes to a table");
        for (k, v) in user {
            if k == "t0" {
                t0 = Some(
                    v.as_float()
                        .or_else(|| v.as_integer().map(|i| i as f64))
                        .ok_or_else(|| Error::config("train.t0", "must be a number"))?,
                );
                continue;
            }
            table.insert(k.clone(), v.clone());
        }
        if t0.is_some() && user.contains_key("n2") {
            return Err(Error::config("train", "give either t0 or n2, not both"));
        }
    }
    let mut cfg: TrainConfig = base.try_into().map_err(|e| toml_err("train", e))?;
    if let Some(t0) = t0 {
        cfg.set_t0(t0).map_err(|e| Error::config("train.t0", e.to_string()))?;
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::parse_raw(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without [`validate`](Self::validate), for callers that apply
    /// overrides first.
    pub fn parse_raw(text: &str) -> Result<ExperimentConfig> {
        let mut root: toml::Table = text.parse().map_err(|e| toml_err("config", e))?;
        for key in root.keys() {
            if !["experiment", "train", "model", "eval", "sweep"].contains(&key.as_str()) {
                return Err(Error::config(key, "unknown section"));
            }
        }
        let experiment: ExperimentSection = root
            .remove("experiment")
            .ok_or_else(|| Error::config("experiment", "missing section"))?
            .try_into()
            .map_err(|e| toml_err("experiment", e))?;
        let train = resolve_train(experiment.task, root.get("train"))?;
        let section = |name: &str| root.get(name).cloned().unwrap_or(toml::Value::Table(toml::Table::new()));
        let model: ModelSection = section("model").try_into().map_err(|e| toml_err("model", e))?;
        let eval: EvalConfig = section("eval").try_into().map_err(|e| toml_err("eval", e))?;
        let sweep = root
            .get("sweep")
            .cloned()
            .map(|v| v.try_into::<SweepSpec>())
            .transpose()
            .map_err(|e| toml_err("sweep", e))?;
        Ok(ExperimentConfig {
            experiment,
            train,
            model,
            eval,
            sweep,
        })
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load_raw(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_raw(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse_raw(&text)
    }

    /// Every key, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| toml_err("config", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.seed > i64::MAX as u64 {
            return Err(Error::config("train.seed", "must be below 2^63"));
        }
        self.mlp()?.validate()?;
        let e = &self.experiment;
        if e.task == Task::CustomOracle {
            if e.oracle_cmd.as_deref().is_none_or(str::is_empty) {
                return Err(Error::config("experiment.oracle_cmd", "required for custom_oracle"));
            }
            if e.method == Method::FmDd {
                return Err(Error::DistanceUnavailable("external_oracle".into()));
            }
        }
        e.task.target(e.oracle_data)?;
        if self.eval.trials == 0 || self.eval.n == 0 || self.eval.projections == 0 || !(self.eval.p >= 1.0) {
            return Err(Error::config("eval", "trials, n, projections must be >= 1 and p >= 1"));
        }
        if let Some(s) = &self.sweep {
            s.settings()?;
        }
        Ok(())
    }

    pub fn target(&self) -> Target {
        self.experiment
            .task
            .target(self.experiment.oracle_data)
            .expect("validated")
    }

    pub fn mlp(&self) -> Result<MlpConfig> {
        let d = self
            .experiment
            .task
            .target(self.experiment.oracle_data)?
            .dim();
        Ok(MlpConfig {
            input_dim: d,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            time_embedding: self.model.time_embedding,
        })
    }

    /// The constraint set of the task; `custom_oracle` spawns its command
    /// lazily on first query.
    pub fn constraint(&self) -> ConstraintSet {
        let e = &self.experiment;
        match e.task {
            Task::CustomOracle => ConstraintSet::external(
                ExternalOracle::new(e.oracle_cmd.clone().unwrap_or_default(), self.target().dim())
                    .with_timeout(Duration::from_millis(e.oracle_timeout_ms))
                    .with_max_attempts(e.oracle_attempts),
            ),
            _ => self.target().constraint(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\ntask = \"box\"\nmethod = \"fm_re\"\n";

    #[test]
    fn task_defaults_fill_train() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!((c.train.lambda, c.train.steps, c.train.n2), (80.0, 75, 15));
        let c = ExperimentConfig::parse("[experiment]\ntask = \"subspace\"\nmethod = \"fm\"\n").unwrap();
        assert_eq!((c.train.lambda, c.train.steps, c.train.n2), (1.0, 70, 10));
        assert_eq!(c.mlp().unwrap().input_dim, 10);
    }

    #[test]
    fn resolved_text_round_trips() {
        let text = format!("{MINIMAL}[train]\nt0 = 0.4\nseed = 7\n[model]\nhidden = [8]\n[sweep]\nlambda = [2.0, 30.0]\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.train.n2, 45);
        let again = ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_toml().unwrap(), again.to_toml().unwrap());
    }

    #[test]
    fn field_level_errors() {
        let err = ExperimentConfig::parse("[experiment]\ntask = \"cube\"\nmethod = \"fm\"\n").unwrap_err();
        assert!(err.to_string().contains("cube"), "{err}");
        let err = ExperimentConfig::parse(&format!("{MINIMAL}[train]\nlambda = -1.0\n")).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
        let err = ExperimentConfig::parse(&format!("{MINIMAL}[train]\nlamda = 1.0\n")).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}[bogus]\n")).is_err());
    }

    #[test]
    fn fmdd_on_oracle_task_is_rejected() {
        let text = "[experiment]\ntask = \"custom_oracle\"\nmethod = \"fm_dd\"\noracle_cmd = \"cat\"\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("distance unavailable"), "{err}");
    }

    #[test]
    fn sweep_shapes() {
        let cart = SweepSpec {
            lambda: Some(vec![2.0, 30.0]),
            n2: Some(vec![15, 30]),
            ..SweepSpec::default()
        };
        assert_eq!(cart.settings().unwrap().len(), 4);
        let paired = SweepSpec {
            paired: true,
            t0: Some(vec![0.0, 0.2, 0.4, 0.6, 0.8]),
            n2: Some(vec![75, 60, 45, 30, 15]),
            ..SweepSpec::default()
        };
        let s = paired.settings().unwrap();
        assert_eq!(s.len(), 5);
        let mut t = TrainConfig::default();
        s[2].apply(&mut t).unwrap();
        assert_eq!(t.n2, 45);
        let mismatched = SweepSetting {
            lambda: None,
            t0: Some(0.2),
            n2: Some(15),
        };
        assert!(mismatched.apply(&mut TrainConfig::default()).is_err());
        assert!(SweepSpec::default().settings().is_err());
        let uneven = SweepSpec {
            paired: true,
            t0: Some(vec![0.0]),
            n2: Some(vec![75, 60]),
            ..SweepSpec::default()
        };
        assert!(uneven.settings().is_err());
    }
}
