//! Orchestration of training, evaluation and sweeps for one
//! [`ExperimentConfig`], plus the on-disk artifact layout used by the CLI.
//!
//! Output directory layout:
//!
//! | file | written by |
//! |---|---|
//! | `config.resolved` | every command |
//! | `model.ckpt` | `train` with `fm` / `fm_dd` |
//! | `theta1.ckpt`, `theta2.ckpt` | `train` with `fm_re` |
//! | `train.csv` | `train`, final stage |
//! | `train_stage1.csv` | `train` with `fm_re`, or warm-started `fm_dd` |
//! | `metrics.csv` | `eval` |
//! | `sweep.csv` | `sweep` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Method, SweepSetting};
use crate::error::{Error, Result};
use crate::flow;
use crate::metrics::{self, MetricsSummary, TrialResult};
use crate::model::ParamSet;
use crate::rng::{self, StreamRng};
use crate::targets::sample_q0;
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig, TrainReport};

pub const RESOLVED: &str = "config.resolved";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const THETA1_CKPT: &str = "theta1.ckpt";
pub const THETA2_CKPT: &str = "theta2.ckpt";
pub const TRAIN_CSV: &str = "train.csv";
pub const STAGE1_CSV: &str = "train_stage1.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

pub const SWEEP_HEADER: &str =
    "method,task,setting,lambda,t0,n2,trial,swd,viol,dist,wall_ms";

/// A trained sampler.
#[derive(Clone, Debug)]
pub enum Trained {
    /// One field integrated over the whole grid (FM, FM-DD).
    Single(ParamSet),
    /// FM-RE: `theta1` before `t0`, `theta2` after.
    TwoStage { theta1: ParamSet, theta2: ParamSet },
}

impl Trained {
    /// Mean-flow samples from the initial noise `x0`.
    pub fn sample(&self, train: &TrainConfig, x0: &Tensor) -> Result<Tensor> {
        match self {
            Trained::Single(p) => flow::integrate(&p.constants(), x0, &train.grid()?),
            Trained::TwoStage { theta1, theta2 } => flow::integrate_two(
                &theta1.constants(),
                &theta2.constants(),
                x0,
                &train.split_grid()?,
            ),
        }
    }

    pub fn checkpoints(&self) -> Vec<(&'static str, &ParamSet)> {
        match self {
            Trained::Single(p) => vec![(MODEL_CKPT, p)],
            Trained::TwoStage { theta1, theta2 } => vec![(THETA1_CKPT, theta1), (THETA2_CKPT, theta2)],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Trained,
    /// Stage reports in order; the last one is the method's own stage.
    pub reports: Vec<TrainReport>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &TrainReport {
        self.reports.last().expect("at least one stage")
    }
}

/// Trains the configured method.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.target();
    let mlp = cfg.mlp()?;
    let c = cfg.constraint();
    let t = &cfg.train;
    Ok(match cfg.experiment.method {
        Method::Fm => {
            let (p, r) = training::train_fm(t, &mlp, &data)?;
            TrainOutcome {
                model: Trained::Single(p),
                reports: vec![r],
            }
        }
        Method::FmDd => {
            if cfg.experiment.fmdd_warm_start {
                let (p1, r1) = training::train_fm(t, &mlp, &data)?;
                let (p, r) = training::train_fmdd(t, &mlp, &data, &c, Some(&p1))?;
                TrainOutcome {
                    model: Trained::Single(p),
                    reports: vec![r1, r],
                }
            } else {
                let (p, r) = training::train_fmdd(t, &mlp, &data, &c, None)?;
                TrainOutcome {
                    model: Trained::Single(p),
                    reports: vec![r],
                }
            }
        }
        Method::FmRe => {
            let (theta1, theta2, r1, r2) = training::train_fmre(t, &mlp, &data, &c)?;
            TrainOutcome {
                model: Trained::TwoStage { theta1, theta2 },
                reports: vec![r1, r2],
            }
        }
    })
}

/// Same result as [`train`], reusing a finished vanilla-FM outcome as
/// stage 1. `fm` must come from [`train`] on this config with
/// `method = fm`; only the stage-1 fields of `[train]` matter for it.
pub fn train_from_fm(cfg: &ExperimentConfig, fm: &TrainOutcome) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (Trained::Single(theta1), [r1]) = (&fm.model, fm.reports.as_slice()) else {
        return Err(Error::InvalidArgument("stage 1 must be a single vanilla FM model".into()));
    };
    if r1.stage != "fm" || r1.seed != cfg.train.seed {
        return Err(Error::InvalidArgument(format!(
            "stage 1 is `{}` with seed {}, expected `fm` with seed {}",
            r1.stage, r1.seed, cfg.train.seed
        )));
    }
    let data = cfg.target();
    let c = cfg.constraint();
    Ok(match cfg.experiment.method {
        Method::Fm => fm.clone(),
        Method::FmDd if cfg.experiment.fmdd_warm_start => {
            let (p, r) = training::train_fmdd(&cfg.train, &cfg.mlp()?, &data, &c, Some(theta1))?;
            TrainOutcome {
                model: Trained::Single(p),
                reports: vec![r1.clone(), r],
            }
        }
        Method::FmDd => train(cfg)?,
        Method::FmRe => {
            let (theta2, r2) = training::train_fmre_stage2(&cfg.train, theta1, &data, &c)?;
            TrainOutcome {
                model: Trained::TwoStage {
                    theta1: theta1.clone(),
                    theta2,
                },
                reports: vec![r1.clone(), r2],
            }
        }
    })
}

/// `eval.n` reference samples from the task's target, stream
/// `(seed, "eval.reference", 0)`.
pub fn reference_set(cfg: &ExperimentConfig) -> Result<Tensor> {
    cfg.target()
        .sample(cfg.eval.n, &mut rng::stream(cfg.train.seed, "eval.reference", 0))
}

/// Mean-flow evaluation over `eval.trials` trials of `eval.n` samples each.
pub fn evaluate(cfg: &ExperimentConfig, model: &Trained, workers: usize) -> Result<MetricsSummary> {
    let reference = reference_set(cfg)?;
    evaluate_against(cfg, model, &reference, workers)
}

fn evaluate_against(
    cfg: &ExperimentConfig,
    model: &Trained,
    reference: &Tensor,
    workers: usize,
) -> Result<MetricsSummary> {
    let d = reference.cols();
    let sampler = |n: usize, rng: &mut StreamRng| -> Result<Tensor> {
        model.sample(&cfg.train, &sample_q0(d, n, rng))
    };
    metrics::evaluate_trials(
        &sampler,
        &cfg.constraint(),
        reference,
        cfg.eval.trials,
        cfg.eval.n,
        cfg.train.seed,
        cfg.eval.swd(),
        workers,
    )
}

/// Loads the checkpoints `train` wrote for this config, checking each
/// against the configured network.
pub fn load_trained(cfg: &ExperimentConfig, paths: &[PathBuf]) -> Result<Trained> {
    let mlp = cfg.mlp()?;
    let want = if cfg.experiment.method == Method::FmRe { 2 } else { 1 };
    if paths.len() != want {
        return Err(Error::InvalidArgument(format!(
            "method {} needs {want} checkpoint(s), got {}",
            cfg.experiment.method,
            paths.len()
        )));
    }
    let mut ps = paths
        .iter()
        .map(|p| ParamSet::load_expecting(p, &mlp))
        .collect::<Result<Vec<_>>>()?;
    Ok(if want == 1 {
        Trained::Single(ps.remove(0))
    } else {
        let theta2 = ps.remove(1);
        let theta1 = ps.remove(0);
        Trained::TwoStage { theta1, theta2 }
    })
}

/// Default checkpoint paths for `cfg` inside `dir`.
pub fn default_checkpoints(cfg: &ExperimentConfig, dir: &Path) -> Vec<PathBuf> {
    match cfg.experiment.method {
        Method::FmRe => vec![dir.join(THETA1_CKPT), dir.join(THETA2_CKPT)],
        _ => vec![dir.join(MODEL_CKPT)],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: usize,
    pub lambda: f64,
    pub t0: f64,
    pub n2: usize,
    pub trial: usize,
    pub result: TrialResult,
    /// Wall time of the method's final training stage.
    pub wall_ms: f64,
}

impl SweepRow {
    pub fn csv_row(&self, method: Method, task: &str) -> String {
        let mut s = format!(
            "{method},{task},{},{:e},{:e},{},{},{:e},{:e},",
            self.setting, self.lambda, self.t0, self.n2, self.trial, self.result.swd, self.result.violation
        );
        if let Some(d) = self.result.distance {
            let _ = write!(s, "{d:e}");
        }
        let _ = write!(s, ",{:.3}", self.wall_ms);
        s
    }
}

/// Trains and evaluates every setting of `cfg.sweep` from scratch with the
/// root seed, calling `progress` after each setting.
pub fn sweep(
    cfg: &ExperimentConfig,
    workers: usize,
    mut progress: impl FnMut(usize, &SweepSetting),
) -> Result<Vec<SweepRow>> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep", "empty sweep"))?;
    let settings = spec.settings()?;
    let reference = reference_set(cfg)?;
    let mut rows = Vec::new();
    for (k, s) in settings.iter().enumerate() {
        let mut one = cfg.clone();
        one.sweep = None;
        s.apply(&mut one.train)?;
        let outcome = train(&one)?;
        let summary = evaluate_against(&one, &outcome.model, &reference, workers)?;
        let wall_ms = outcome.final_report().wall_ms;
        rows.extend(summary.trials.iter().enumerate().map(|(trial, r)| SweepRow {
            setting: k,
            lambda: one.train.lambda,
            t0: one.train.t0(),
            n2: one.train.n2,
            trial,
            result: *r,
            wall_ms,
        }));
        progress(k, s);
    }
    Ok(rows)
}

pub fn sweep_csv(cfg: &ExperimentConfig, rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row(cfg.experiment.method, cfg.experiment.task.as_str()));
        s.push('\n');
    }
    s
}

pub fn metrics_csv(cfg: &ExperimentConfig, m: &MetricsSummary) -> String {
    format!(
        "{}\n{}\n",
        metrics::METRICS_HEADER,
        m.csv_row(cfg.experiment.method.as_str(), cfg.experiment.task.as_str())
    )
}

/// Header `x0,...,x{d-1}` and one row per sample, 17 significant digits.
pub fn data_csv(x: &Tensor) -> String {
    let d = x.cols();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let mut s = header.join(",");
    s.push('\n');
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, RESOLVED, &cfg.to_toml()?)?;
    Ok(())
}

/// `train`: writes checkpoints, stage CSVs and `config.resolved` under `dir`.
pub fn run_train(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare(cfg, dir)?;
    let mut outcome = train(cfg)?;
    let paths: Vec<PathBuf> = outcome
        .model
        .checkpoints()
        .into_iter()
        .map(|(name, p)| {
            let path = dir.join(name);
            p.save(&path).map(|_| path)
        })
        .collect::<Result<_>>()?;
    if let Some(last) = outcome.reports.last_mut() {
        last.checkpoint = paths.last().cloned();
    }
    if outcome.reports.len() == 2 {
        outcome.reports[0].checkpoint = paths.first().filter(|_| paths.len() == 2).cloned();
        write(dir, STAGE1_CSV, &outcome.reports[0].to_csv())?;
    }
    write(dir, TRAIN_CSV, &outcome.final_report().to_csv())?;
    Ok(outcome)
}

/// `eval`: writes `metrics.csv` and `config.resolved` under `dir`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    dir: &Path,
    workers: usize,
) -> Result<MetricsSummary> {
    cfg.validate()?;
    let model = load_trained(cfg, checkpoints)?;
    prepare(cfg, dir)?;
    let m = evaluate(cfg, &model, workers)?;
    write(dir, METRICS_CSV, &metrics_csv(cfg, &m))?;
    Ok(m)
}

/// `sweep`: writes `sweep.csv` and `config.resolved` under `dir`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    dir: &Path,
    workers: usize,
    progress: impl FnMut(usize, &SweepSetting),
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.sweep.is_none() {
        return Err(Error::config("sweep", "empty sweep"));
    }
    prepare(cfg, dir)?;
    let rows = sweep(cfg, workers, progress)?;
    write(dir, SWEEP_CSV, &sweep_csv(cfg, &rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: &str, task: &str) -> ExperimentConfig {
        let text = format!(
            "[experiment]\ntask = \"{task}\"\nmethod = \"{method}\"\n\
             [train]\niters1 = 3\niters2 = 2\nbatch1 = 8\nbatch2 = 4\nsteps = 6\nn2 = 2\n\
             [model]\nhidden = [8]\n[eval]\ntrials = 2\nn = 50\nprojections = 8\n"
        );
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn fm_re_outcome_has_two_stages() {
        let out = train(&tiny("fm_re", "box")).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert!(matches!(out.model, Trained::TwoStage { .. }));
        assert_eq!(out.model.checkpoints().len(), 2);
    }

    #[test]
    fn fm_dd_cold_start_has_one_stage() {
        let mut c = tiny("fm_dd", "box");
        c.experiment.fmdd_warm_start = false;
        let out = train(&c).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.model.checkpoints()[0].0, MODEL_CKPT);
    }

    #[test]
    fn reusing_stage_one_matches_full_training() {
        let fm = train(&tiny("fm", "box")).unwrap();
        for m in ["fm_dd", "fm_re"] {
            let c = tiny(m, "box");
            let full = train(&c).unwrap();
            let reused = train_from_fm(&c, &fm).unwrap();
            let ck = |o: &TrainOutcome| o.model.checkpoints().iter().map(|(_, p)| p.to_bytes()).collect::<Vec<_>>();
            assert_eq!(ck(&full), ck(&reused), "{m}");
        }
        let mut other = tiny("fm_re", "box");
        other.train.seed = 1;
        assert!(train_from_fm(&other, &fm).is_err());
    }

    #[test]
    fn evaluation_ignores_worker_count() {
        let c = tiny("fm", "two_boxes");
        let out = train(&c).unwrap();
        let a = evaluate(&c, &out.model, 1).unwrap();
        let b = evaluate(&c, &out.model, 3).unwrap();
        assert_eq!(metrics_csv(&c, &a), metrics_csv(&c, &b));
    }

    #[test]
    fn data_csv_shape() {
        let x = Tensor::from_rows(&[vec![0.1, -2.0], vec![1.0 / 3.0, 4.0]]).unwrap();
        let s = data_csv(&x);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "x0,x1");
        assert_eq!(lines.len(), 3);
        let back: f64 = lines[2].split(',').next().unwrap().parse().unwrap();
        assert_eq!(back, 1.0 / 3.0);
    }

    #[test]
    fn sweep_needs_axes() {
        let c = tiny("fm_dd", "ball8");
        assert!(sweep(&c, 1, |_, _| {}).is_err());
    }
}
