//! Trainers: vanilla flow matching, FM-DD (distance penalty through the
//! unrolled sampler) and two-stage FM-RE (randomized exploration with a
//! score-function estimator of the constraint-satisfaction gradient).

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::flow::{self, FmBatch, Rollout, TimeGrid};
use crate::model::{MlpConfig, ParamSet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, StreamRng};
use crate::targets::{sample_q0, Target};
use crate::tensor::Tensor;

/// Hyperparameters shared by the three trainers.
///
/// Stage 1 (`*1`) is vanilla FM. Stage 2 (`*2`) is the FM-DD or FM-RE phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Euler steps `N` for rollouts and sampling.
    pub steps: usize,
    /// Randomized steps `N2` of FM-RE; the switch time is `t0 = (N - N2) / N`.
    pub n2: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub batch1: usize,
    pub batch2: usize,
    pub iters1: usize,
    pub iters2: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub sigma_init: f64,
    pub sigma_floor: f64,
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 80.0,
            steps: 75,
            n2: 15,
            lr1: 1e-3,
            lr2: 1e-3,
            batch1: 256,
            batch2: 64,
            iters1: 5000,
            iters2: 2000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            sigma_init: 0.1,
            sigma_floor: 1e-4,
            baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("train.{field}"), msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be finite and >= 0, got {}", self.lambda));
        }
        if self.batch1 == 0 || self.batch2 == 0 {
            return bad("batch", "batch sizes must be >= 1".into());
        }
        for (f, v) in [("lr1", self.lr1), ("lr2", self.lr2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(f, format!("must be > 0, got {v}"));
            }
        }
        if !(self.sigma_init > 0.0) || !(self.sigma_floor > 0.0) {
            return bad("sigma_init", "sigma_init and sigma_floor must be > 0".into());
        }
        if self.steps == 0 || self.n2 == 0 || self.n2 > self.steps {
            return bad("n2", format!("need 1 <= n2 <= steps, got n2 = {}, steps = {}", self.n2, self.steps));
        }
        Ok(())
    }

    /// Plain grid with `steps` intervals.
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.steps)
    }

    /// Grid split into `N1 = N - N2` deterministic and `N2` randomized steps.
    pub fn split_grid(&self) -> Result<TimeGrid> {
        if self.n2 > self.steps {
            return Err(Error::InvalidArgument(format!("n2 = {} exceeds steps = {}", self.n2, self.steps)));
        }
        TimeGrid::with_split(self.steps - self.n2, self.n2)
    }

    pub fn t0(&self) -> f64 {
        (self.steps - self.n2.min(self.steps)) as f64 / self.steps as f64
    }

    /// Sets `n2` from a switch time on the grid.
    pub fn set_t0(&mut self, t0: f64) -> Result<()> {
        self.n2 = TimeGrid::from_t0(self.steps, t0)?.n2();
        Ok(())
    }
}

/// Where training data comes from.
pub trait DataSource {
    fn dim(&self) -> usize;
    fn sample(&self, b: usize, rng: &mut StreamRng) -> Result<Tensor>;
}

impl DataSource for Target {
    fn dim(&self) -> usize {
        Target::dim(self)
    }

    fn sample(&self, b: usize, rng: &mut StreamRng) -> Result<Tensor> {
        Target::sample(self, b, rng)
    }
}

/// Draws of the FM time variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeSampling {
    /// `t ~ U[0, 1]`.
    Uniform,
    /// `t = i / N`, `i ~ U{0, .., N-1}`.
    Grid(usize),
    /// `t = t0 + i / N`, `i ~ U{0, .., N2-1}` with `t0 = N1 / N`.
    Tail { n1: usize, n2: usize },
}

impl TimeSampling {
    /// Returns the time and the step index (offset from `t0` for `Tail`).
    fn draw(self, rng: &mut StreamRng) -> (f64, usize) {
        match self {
            TimeSampling::Uniform => (rng.random::<f64>(), 0),
            TimeSampling::Grid(n) => {
                let i = rng.random_range(0..n);
                (i as f64 / n as f64, i)
            }
            TimeSampling::Tail { n1, n2 } => {
                let i = rng.random_range(0..n2);
                ((n1 + i) as f64 / (n1 + n2) as f64, i)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub fm_loss: f64,
    pub penalty: f64,
    /// Milliseconds since the start of the stage.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: String,
    pub seed: u64,
    pub records: Vec<IterRecord>,
    pub wall_ms: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    fn new(stage: &str, seed: u64) -> TrainReport {
        TrainReport {
            stage: stage.into(),
            seed,
            records: Vec::new(),
            wall_ms: 0.0,
            checkpoint: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,fm_loss,penalty,wall_ms\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{:.3}", r.iter, r.fm_loss, r.penalty, r.wall_ms);
        }
        s
    }

    /// Mean FM loss over the first / last `k` iterations.
    pub fn fm_loss_head_tail(&self, k: usize) -> (f64, f64) {
        let n = self.records.len();
        let k = k.min(n).max(1);
        let mean = |rs: &[IterRecord]| rs.iter().map(|r| r.fm_loss).sum::<f64>() / rs.len() as f64;
        (mean(&self.records[..k]), mean(&self.records[n - k..]))
    }
}

fn at_iter<T>(stage: &str, it: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{stage} iteration {it}: {context}"),
        },
        e => e,
    })
}

fn check_dims(mlp: &MlpConfig, data: &dyn DataSource) -> Result<()> {
    if mlp.input_dim != data.dim() {
        return Err(Error::config(
            "model.input_dim",
            format!("{} does not match data dimension {}", mlp.input_dim, data.dim()),
        ));
    }
    Ok(())
}

/// The minibatch of iteration `it`: noise, data and times from the streams
/// `(seed, tag.x0 | tag.x1 | tag.t, it)`. Also returns the step indices.
pub fn draw_batch(
    seed: u64,
    tag: &str,
    it: usize,
    b: usize,
    data: &dyn DataSource,
    sampling: TimeSampling,
) -> Result<(FmBatch, Vec<usize>)> {
    let it = it as u64;
    let x0 = sample_q0(data.dim(), b, &mut rng::stream(seed, &format!("{tag}.x0"), it));
    let x1 = data.sample(b, &mut rng::stream(seed, &format!("{tag}.x1"), it))?;
    let mut trng = rng::stream(seed, &format!("{tag}.t"), it);
    let (t, idx) = (0..b).map(|_| sampling.draw(&mut trng)).unzip();
    Ok((FmBatch::new(x0, x1, t)?, idx))
}

/// Vanilla flow matching with `t ~ U[0, 1]` (stage-1 budget).
pub fn train_fm(cfg: &TrainConfig, mlp: &MlpConfig, data: &dyn DataSource) -> Result<(ParamSet, TrainReport)> {
    train_fm_with(cfg, mlp, data, TimeSampling::Uniform, "fm")
}

/// Vanilla flow matching with a chosen time distribution and stream tag.
pub fn train_fm_with(
    cfg: &TrainConfig,
    mlp: &MlpConfig,
    data: &dyn DataSource,
    sampling: TimeSampling,
    tag: &str,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    check_dims(mlp, data)?;
    let mut params = ParamSet::init(mlp, rng::derive_seed(cfg.seed, "init", 0))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr1);
    let mut report = TrainReport::new("fm", cfg.seed);
    let start = Instant::now();
    for it in 0..cfg.iters1 {
        let (batch, _) = draw_batch(cfg.seed, tag, it, cfg.batch1, data, sampling)?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = at_iter("fm", it, flow::fm_loss(&tape, &bound, &batch))?;
        let grads = at_iter("fm", it, tape.backward(&loss))?;
        at_iter("fm", it, opt.step(&mut params, &bound.gradients(&grads)))?;
        report.records.push(IterRecord {
            iter: it,
            fm_loss: loss.value().item(),
            penalty: 0.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((params, report))
}

/// FM-DD objective on one batch: the FM term at the batch times plus
/// `lambda * mean d(x1, C)` where `x1` is the recorded Euler rollout from the
/// batch noise. Returns the total loss and the two unweighted terms.
pub fn fmdd_loss(
    tape: &Tape,
    bound: &crate::model::BoundParams,
    batch: &FmBatch,
    constraint: &ConstraintSet,
    lambda: f64,
    grid: &TimeGrid,
) -> Result<(Var, f64, f64)> {
    let fm = flow::fm_loss(tape, bound, batch)?;
    let rollout = flow::sample_deterministic(tape, bound, &batch.x0, grid, true)?;
    let dist = constraint.distance(tape, rollout.terminal())?;
    let pen = tape.mean(&dist)?;
    let total = tape.add(&fm, &tape.scale(&pen, lambda)?)?;
    let (f, p) = (fm.value().item(), pen.value().item());
    Ok((total, f, p))
}

/// FM-DD: flow matching on the discrete grid plus the distance penalty on the
/// terminal state of a full recorded rollout, one update per batch
/// (stage-2 budget). Starts from `init` when given.
pub fn train_fmdd(
    cfg: &TrainConfig,
    mlp: &MlpConfig,
    data: &dyn DataSource,
    constraint: &ConstraintSet,
    init: Option<&ParamSet>,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    check_dims(mlp, data)?;
    if !constraint.has_distance() {
        return Err(Error::DistanceUnavailable(constraint.name().into()));
    }
    let grid = cfg.grid()?;
    let mut params = match init {
        Some(p) if p.config() == mlp => p.clone(),
        Some(p) => {
            return Err(Error::ConfigMismatch {
                expected: mlp.to_text(),
                found: p.config().to_text(),
            })
        }
        None => ParamSet::init(mlp, rng::derive_seed(cfg.seed, "init", 0))?,
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr2);
    let mut report = TrainReport::new("fm_dd", cfg.seed);
    let start = Instant::now();
    for it in 0..cfg.iters2 {
        let (batch, _) = draw_batch(cfg.seed, "dd", it, cfg.batch2, data, TimeSampling::Grid(grid.steps()))?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (loss, fm, pen) = at_iter("fm_dd", it, fmdd_loss(&tape, &bound, &batch, constraint, cfg.lambda, &grid))?;
        let grads = at_iter("fm_dd", it, tape.backward(&loss))?;
        at_iter("fm_dd", it, opt.step(&mut params, &bound.gradients(&grads)))?;
        report.records.push(IterRecord {
            iter: it,
            fm_loss: fm,
            penalty: pen,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((params, report))
}

/// Score-function surrogate `mean_b sum_i log pi(u_i | x_i) * w_b`, where
/// `w_b = 1_C(x1_b)`, or `1_C(x1_b) - mean(1_C)` with `baseline`. Its gradient
/// is the Monte-Carlo estimate of the gradient of `P(X1 in C)`.
pub fn pg_surrogate(tape: &Tape, rollout: &Rollout, inside: &[bool], baseline: bool) -> Result<Var> {
    if rollout.log_density.is_empty() {
        return Err(Error::Contract(
            "policy gradient needs trajectories with recorded log-densities".into(),
        ));
    }
    let b = rollout.batch_size();
    if inside.len() != b {
        return Err(Error::Contract(format!(
            "{} membership bits for {b} trajectories",
            inside.len()
        )));
    }
    let mut w: Vec<f64> = inside.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    if baseline {
        let m = w.iter().sum::<f64>() / b as f64;
        w.iter_mut().for_each(|v| *v -= m);
    }
    let mut total = rollout.log_density[0].clone();
    for l in &rollout.log_density[1..] {
        total = tape.add(&total, l)?;
    }
    let weighted = tape.mul(&total, &Var::constant(Tensor::from_parts(vec![b], w)))?;
    tape.scale(&tape.sum(&weighted)?, 1.0 / b as f64)
}

/// Gradient of [`pg_surrogate`] with membership taken from `constraint` at
/// the terminal states.
pub fn pg_gradient(
    tape: &Tape,
    rollout: &Rollout,
    constraint: &ConstraintSet,
    baseline: bool,
) -> Result<Gradients> {
    let inside = constraint.contains_batch(rollout.terminal().value())?;
    let s = pg_surrogate(tape, rollout, &inside, baseline)?;
    tape.backward(&s)
}

/// Stage 2 of FM-RE from a trained `theta1`, which stays frozen.
///
/// Each iteration rolls randomized trajectories (frozen `theta1` before `t0`,
/// Gaussian-perturbed `theta2` after), scores them with the score-function
/// surrogate, and adds the reparameterized FM term at `t = t0 + i / N`.
/// Minimizes `fm - lambda * surrogate` over `theta2` and `log_sigma`.
pub fn train_fmre_stage2(
    cfg: &TrainConfig,
    theta1: &ParamSet,
    data: &dyn DataSource,
    constraint: &ConstraintSet,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    check_dims(theta1.config(), data)?;
    let grid = cfg.split_grid()?;
    let (n1, n2) = (grid.n1(), grid.n2());
    let frozen = theta1.constants();
    let mut theta2 = theta1.clone().with_log_sigma(n2, cfg.sigma_init)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr2);
    let mut report = TrainReport::new("fm_re", cfg.seed);
    let start = Instant::now();
    for it in 0..cfg.iters2 {
        let (batch, steps) =
            draw_batch(cfg.seed, "re", it, cfg.batch2, data, TimeSampling::Tail { n1, n2 })?;
        let eps = rng::standard_normal(&mut rng::stream(cfg.seed, "re.eps", it as u64), batch.x0.shape());
        let mut noise = rng::stream(cfg.seed, "re.explore", it as u64);
        let tape = Tape::new();
        let bound = theta2.bind(&tape);
        let mut step = || -> Result<(Var, f64, f64)> {
            let rollout = flow::sample_randomized(
                &tape, &frozen, &bound, &batch.x0, &grid, &mut noise, true, cfg.sigma_floor,
            )?;
            let inside = constraint.contains_batch(rollout.terminal().value())?;
            let surrogate = pg_surrogate(&tape, &rollout, &inside, cfg.baseline)?;
            let fm = flow::randomized_fm_loss(&tape, &bound, &batch, &steps, &eps, cfg.sigma_floor)?;
            let total = tape.sub(&fm, &tape.scale(&surrogate, cfg.lambda)?)?;
            Ok((total, fm.value().item(), -surrogate.value().item()))
        };
        let (loss, fm, pen) = at_iter("fm_re", it, step())?;
        let grads = at_iter("fm_re", it, tape.backward(&loss))?;
        at_iter("fm_re", it, opt.step(&mut theta2, &bound.gradients(&grads)))?;
        report.records.push(IterRecord {
            iter: it,
            fm_loss: fm,
            penalty: pen,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((theta2, report))
}

/// Both FM-RE stages: `theta1` by vanilla FM, then stage 2 from `theta2 <- theta1`.
pub fn train_fmre(
    cfg: &TrainConfig,
    mlp: &MlpConfig,
    data: &dyn DataSource,
    constraint: &ConstraintSet,
) -> Result<(ParamSet, ParamSet, TrainReport, TrainReport)> {
    let (theta1, r1) = train_fm(cfg, mlp, data)?;
    let (theta2, r2) = train_fmre_stage2(cfg, &theta1, data, constraint)?;
    Ok((theta1, theta2, r1, r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(iters: usize) -> TrainConfig {
        TrainConfig {
            iters1: iters,
            iters2: iters,
            batch1: 16,
            batch2: 8,
            steps: 10,
            n2: 2,
            lambda: 5.0,
            ..TrainConfig::default()
        }
    }

    fn mlp(d: usize) -> MlpConfig {
        MlpConfig::new(d).with_hidden(vec![16])
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            n2: 76,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut c = TrainConfig::default();
        c.set_t0(0.4).unwrap();
        assert_eq!(c.n2, 45);
        assert!(c.set_t0(0.81).is_err());
        assert!((TrainConfig::default().t0() - 0.8).abs() < 1e-12);
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch2: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fm_is_deterministic() {
        let cfg = quick(5);
        let (a, ra) = train_fm(&cfg, &mlp(2), &Target::BoxGmm).unwrap();
        let (b, rb) = train_fm(&cfg, &mlp(2), &Target::BoxGmm).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra.records.len(), 5);
        assert!(ra.records.iter().zip(&rb.records).all(|(x, y)| x.fm_loss == y.fm_loss));
    }

    #[test]
    fn fmdd_needs_distance() {
        let c = ConstraintSet::external(crate::constraints::ExternalOracle::new("cat", 2));
        let err = train_fmdd(&quick(1), &mlp(2), &Target::BoxGmm, &c, None).unwrap_err();
        assert!(matches!(err, Error::DistanceUnavailable(_)));
    }

    #[test]
    fn fmre_keeps_theta1_and_adds_sigma() {
        let cfg = quick(3);
        let c = Target::BoxGmm.constraint();
        let (t1, _) = train_fm(&cfg, &mlp(2), &Target::BoxGmm).unwrap();
        let before = t1.to_bytes();
        let (t2, r2) = train_fmre_stage2(&cfg, &t1, &Target::BoxGmm, &c).unwrap();
        assert_eq!(t1.to_bytes(), before);
        assert_eq!(t2.log_sigma().unwrap().shape(), &[2, 2]);
        assert_eq!(r2.records.len(), 3);
    }

    #[test]
    fn surrogate_requires_log_densities() {
        let tape = Tape::new();
        let p = ParamSet::zeros(&mlp(1)).unwrap();
        let r = flow::sample_deterministic(&tape, &p.constants(), &Tensor::zeros(&[2, 1]), &TimeGrid::new(2).unwrap(), false)
            .unwrap();
        assert!(matches!(pg_surrogate(&tape, &r, &[true, true], false), Err(Error::Contract(_))));
    }

    #[test]
    fn report_csv_schema() {
        let (_, r) = train_fm(&quick(2), &mlp(2), &Target::TwoBoxes).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,fm_loss,penalty,wall_ms");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }
}
