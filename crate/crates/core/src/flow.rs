//! Linear interpolant, flow-matching loss terms and forward-Euler samplers.
//!
//! All samplers integrate on a uniform grid `t_i = i / N`. The randomized
//! sampler switches at `t0 = N1 / N` from a frozen deterministic field to a
//! Gaussian-perturbed field `u + sigma_i * eps`, and records the log-density of
//! every perturbed velocity for the score-function estimator.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::BoundParams;
use crate::rng::standard_normal;
use crate::tensor::Tensor;

/// Uniform Euler grid with `steps` intervals, optionally split into `n1`
/// deterministic steps followed by `steps - n1` randomized ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
    n1: Option<usize>,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<TimeGrid> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs N >= 1".into()));
        }
        Ok(TimeGrid { steps, n1: None })
    }

    pub fn with_split(n1: usize, n2: usize) -> Result<TimeGrid> {
        if n2 == 0 {
            return Err(Error::InvalidArgument(
                "split grid needs N2 >= 1 (t0 must be < 1)".into(),
            ));
        }
        Ok(TimeGrid {
            steps: n1 + n2,
            n1: Some(n1),
        })
    }

    /// Split grid from `t0`; `t0 * steps` must be an integer to 1e-12.
    pub fn from_t0(steps: usize, t0: f64) -> Result<TimeGrid> {
        if !(0.0..1.0).contains(&t0) {
            return Err(Error::InvalidArgument(format!("t0 = {t0} outside [0, 1)")));
        }
        let n1 = (t0 * steps as f64).round() as usize;
        if (n1 as f64 / steps as f64 - t0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "t0 = {t0} is not on the grid of {steps} steps"
            )));
        }
        TimeGrid::with_split(n1, steps - n1)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn is_split(&self) -> bool {
        self.n1.is_some()
    }

    pub fn n1(&self) -> usize {
        self.n1.unwrap_or(0)
    }

    pub fn n2(&self) -> usize {
        self.steps - self.n1()
    }

    pub fn t0(&self) -> f64 {
        self.time(self.n1())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// `(1 - t) x0 + t x1`; its time derivative is `x1 - x0`.
pub fn interpolant(t: f64, x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(
            "interpolant",
            format!("{:?} vs {:?}", x0.shape(), x1.shape()),
        ));
    }
    Ok(x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b))
}

/// One flow-matching minibatch: noise rows, data rows and a time per row.
#[derive(Clone, Debug)]
pub struct FmBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
}

impl FmBatch {
    pub fn new(x0: Tensor, x1: Tensor, t: Vec<f64>) -> Result<FmBatch> {
        if x0.rank() != 2 || x0.shape() != x1.shape() || t.len() != x0.rows() {
            return Err(Error::shape(
                "fm_batch",
                format!("x0 {:?}, x1 {:?}, t [{}]", x0.shape(), x1.shape(), t.len()),
            ));
        }
        Ok(FmBatch { x0, x1, t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Per-row interpolant points.
    pub fn points(&self) -> Tensor {
        let d = self.x0.cols();
        let mut out = Vec::with_capacity(self.x0.len());
        for (r, &t) in self.t.iter().enumerate() {
            let (a, b) = (self.x0.row(r), self.x1.row(r));
            out.extend((0..d).map(|j| (1.0 - t) * a[j] + t * b[j]));
        }
        Tensor::from_parts(self.x0.shape().to_vec(), out)
    }

    /// Regression targets `x1 - x0`.
    pub fn targets(&self) -> Tensor {
        self.x1.zip_map(&self.x0, |b, a| b - a)
    }
}

/// Batch-mean squared residual `|u(psi_t, t) - (x1 - x0)|^2`.
pub fn fm_loss(tape: &Tape, params: &BoundParams, batch: &FmBatch) -> Result<Var> {
    let x = Var::constant(batch.points());
    let t = Var::constant(Tensor::from_parts(vec![batch.len()], batch.t.clone()));
    let u = params.velocity(tape, &x, &t)?;
    residual_loss(tape, &u, batch)
}

fn residual_loss(tape: &Tape, u: &Var, batch: &FmBatch) -> Result<Var> {
    let r = tape.sub(u, &Var::constant(batch.targets()))?;
    let per_row = tape.sum(&tape.square(&r)?)?;
    tape.scale(&per_row, 1.0 / batch.len() as f64)
}

/// Single-pair flow-matching term for `x0, x1: [d]`.
pub fn fm_loss_term(
    tape: &Tape,
    params: &BoundParams,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
) -> Result<Var> {
    let d = x0.len();
    let batch = FmBatch::new(x0.reshape(vec![1, d])?, x1.reshape(vec![1, d])?, vec![t])?;
    fm_loss(tape, params, &batch)
}

/// Per-row `sigma = max(exp(log_sigma[step]), floor)`, as `[len(steps), d]`.
pub fn sigma_rows(tape: &Tape, log_sigma: &Var, steps: &[usize], floor: f64) -> Result<Var> {
    if floor <= 0.0 || !floor.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma floor must be > 0, got {floor}")));
    }
    let rows = tape.gather_rows(log_sigma, steps)?;
    let s = tape.exp(&rows)?;
    tape.clamp_min(&s, floor)
}

/// `sigma` for one randomized step, as `[d]`.
pub fn sigma_at(tape: &Tape, log_sigma: &Var, step: usize, floor: f64) -> Result<Var> {
    let rows = sigma_rows(tape, log_sigma, &[step], floor)?;
    let d = rows.shape()[1];
    tape.reshape(&rows, vec![d])
}

/// Flow-matching term of the randomized field: the velocity is the
/// reparameterized draw `u(psi_t, t) + sigma_{step} * eps` with `eps` fixed,
/// so the term is differentiable in both the network and `log_sigma`.
pub fn randomized_fm_loss(
    tape: &Tape,
    params: &BoundParams,
    batch: &FmBatch,
    steps: &[usize],
    eps: &Tensor,
    sigma_floor: f64,
) -> Result<Var> {
    let log_sigma = params
        .log_sigma()
        .ok_or_else(|| Error::InvalidArgument("randomized FM term needs log_sigma".into()))?;
    if steps.len() != batch.len() || eps.shape() != batch.x0.shape() {
        return Err(Error::shape(
            "randomized_fm_loss",
            format!("{} steps, eps {:?} for batch {}", steps.len(), eps.shape(), batch.len()),
        ));
    }
    let x = Var::constant(batch.points());
    let t = Var::constant(Tensor::from_parts(vec![batch.len()], batch.t.clone()));
    let mu = params.velocity(tape, &x, &t)?;
    let sigma = sigma_rows(tape, log_sigma, steps, sigma_floor)?;
    let noise = tape.mul(&sigma, &Var::constant(eps.clone()))?;
    let u = tape.add(&mu, &noise)?;
    residual_loss(tape, &u, batch)
}

/// A batch of Euler trajectories on one grid.
///
/// `states[i + 1] == states[i] + velocities[i] * dt` holds exactly.
/// `log_density[k]` is the per-row log-density `[B]` of the velocity drawn at
/// step `randomized_from + k`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub grid: TimeGrid,
    pub states: Vec<Var>,
    pub velocities: Vec<Tensor>,
    pub log_density: Vec<Var>,
    pub randomized_from: usize,
}

/// One trajectory extracted from a [`Rollout`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Tensor,
    pub velocities: Tensor,
    pub log_density: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl Rollout {
    pub fn terminal(&self) -> &Var {
        self.states.last().expect("rollout has at least the initial state")
    }

    pub fn batch_size(&self) -> usize {
        self.states[0].value().rows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].value().cols()
    }

    pub fn trajectory(&self, b: usize) -> Trajectory {
        let d = self.dim();
        let mut states = Vec::with_capacity(self.states.len() * d);
        for s in &self.states {
            states.extend_from_slice(s.value().row(b));
        }
        let mut vel = Vec::with_capacity(self.velocities.len() * d);
        for v in &self.velocities {
            vel.extend_from_slice(v.row(b));
        }
        Trajectory {
            times: self.grid.times(),
            states: Tensor::from_parts(vec![self.states.len(), d], states),
            velocities: Tensor::from_parts(vec![self.velocities.len(), d], vel),
            log_density: self.log_density.iter().map(|l| l.value().data()[b]).collect(),
            terminal: self.terminal().value().row(b).to_vec(),
        }
    }

    /// True iff every recorded step satisfies the Euler identity bit-exactly.
    pub fn satisfies_euler_identity(&self) -> bool {
        let dt = self.grid.dt();
        self.velocities.iter().enumerate().all(|(i, v)| {
            let want = self.states[i].value().zip_map(v, |x, u| x + u * dt);
            want.data()
                .iter()
                .zip(self.states[i + 1].value().data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

fn time_var(rows: usize, t: f64) -> Var {
    Var::constant(Tensor::full(&[rows], t))
}

fn at_step<T>(i: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("Euler step {i}: {context}"),
        },
        e => e,
    })
}

/// Deterministic forward Euler from `t = 0` to `t = 1`.
///
/// With `record` the states stay on `tape`, so a loss on the terminal state
/// backpropagates through every step; otherwise the parameters are detached.
pub fn sample_deterministic(
    tape: &Tape,
    params: &BoundParams,
    x0: &Tensor,
    grid: &TimeGrid,
    record: bool,
) -> Result<Rollout> {
    let p = if record {
        params.clone()
    } else {
        params.detached()
    };
    let rows = x0.rows();
    let dt = grid.dt();
    let mut states = vec![Var::constant(x0.clone())];
    let mut velocities = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let x = states.last().unwrap();
        let u = at_step(i, p.velocity(tape, x, &time_var(rows, grid.time(i))))?;
        let step = at_step(i, tape.scale(&u, dt))?;
        let next = at_step(i, tape.add(x, &step))?;
        velocities.push(u.value().clone());
        states.push(next);
    }
    Ok(Rollout {
        grid: *grid,
        states,
        velocities,
        log_density: Vec::new(),
        randomized_from: grid.steps(),
    })
}

/// Terminal states only, without keeping the trajectory.
pub fn integrate(params: &BoundParams, x0: &Tensor, grid: &TimeGrid) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.detached();
    let rows = x0.rows();
    let dt = grid.dt();
    let mut x = Var::constant(x0.clone());
    for i in 0..grid.steps() {
        let u = at_step(i, p.velocity(&tape, &x, &time_var(rows, grid.time(i))))?;
        x = at_step(i, tape.add(&x, &tape.scale(&u, dt)?))?;
    }
    Ok(x.value().clone())
}

/// Terminal states of the mean flow: `first` before `t0`, `second` after.
/// Agrees with [`sample_randomized`] run with `randomized = false`.
pub fn integrate_two(
    first: &BoundParams,
    second: &BoundParams,
    x0: &Tensor,
    grid: &TimeGrid,
) -> Result<Tensor> {
    let tape = Tape::new();
    let (a, b) = (first.detached(), second.detached());
    let rows = x0.rows();
    let dt = grid.dt();
    let mut x = x0.clone();
    for i in 0..grid.steps() {
        let p = if i < grid.n1() { &a } else { &b };
        let u = at_step(i, p.velocity(&tape, &Var::constant(x.clone()), &time_var(rows, grid.time(i))))?;
        x = x.zip_map(u.value(), |s, v| s + v * dt);
        if !x.all_finite() {
            return Err(Error::NonFinite {
                context: format!("Euler step {i}: state"),
            });
        }
    }
    Ok(x)
}

/// Two-field rollout: `first` (frozen) drives the `N1` steps before `t0`,
/// `second` the remaining `N2`.
///
/// When `randomized`, each late step draws `u~ = mu + sigma_k * eps` with
/// `mu = second(x, t)` evaluated at the detached state, and records
/// `log N(u~ | mu, sigma_k^2 I)` with the action constant and `mu`, `sigma`
/// live. Otherwise `u~ = mu`, no noise is drawn and `log_sigma` is never read.
#[allow(clippy::too_many_arguments)]
pub fn sample_randomized<R: Rng + ?Sized>(
    tape: &Tape,
    first: &BoundParams,
    second: &BoundParams,
    x0: &Tensor,
    grid: &TimeGrid,
    rng: &mut R,
    randomized: bool,
    sigma_floor: f64,
) -> Result<Rollout> {
    if !grid.is_split() {
        return Err(Error::InvalidArgument(
            "randomized sampling needs a split grid (N1, N2, t0)".into(),
        ));
    }
    let frozen = first.detached();
    let log_sigma = if randomized {
        Some(second.log_sigma().ok_or_else(|| {
            Error::InvalidArgument("randomized sampling needs a log_sigma table".into())
        })?)
    } else {
        None
    };
    if let Some(ls) = log_sigma {
        if ls.shape() != [grid.n2(), x0.cols()] {
            return Err(Error::shape(
                "sample_randomized",
                format!("log_sigma {:?} for N2 = {}, d = {}", ls.shape(), grid.n2(), x0.cols()),
            ));
        }
    }
    let rows = x0.rows();
    let dt = grid.dt();
    let n1 = grid.n1();
    let mut states = vec![Var::constant(x0.clone())];
    let mut velocities = Vec::with_capacity(grid.steps());
    let mut log_density = Vec::new();
    for i in 0..grid.steps() {
        let x = states.last().unwrap().detach();
        let t = time_var(rows, grid.time(i));
        let u = if i < n1 {
            at_step(i, frozen.velocity(tape, &x, &t))?.value().clone()
        } else {
            let mu = at_step(i, second.velocity(tape, &x, &t))?;
            match log_sigma {
                Some(ls) => {
                    let sigma = at_step(i, sigma_at(tape, ls, i - n1, sigma_floor))?;
                    let eps = standard_normal(rng, &[rows, x0.cols()]);
                    let s = sigma.value().data();
                    let d = s.len();
                    let data = mu
                        .value()
                        .data()
                        .iter()
                        .zip(eps.data())
                        .enumerate()
                        .map(|(k, (&m, &e))| m + s[k % d] * e)
                        .collect();
                    let action = Tensor::from_parts(vec![rows, d], data);
                    log_density.push(at_step(i, tape.gaussian_log_pdf_rows(&action, &mu, &sigma))?);
                    action
                }
                None => mu.value().clone(),
            }
        };
        let next = x.value().zip_map(&u, |a, v| a + v * dt);
        if !next.all_finite() {
            return Err(Error::NonFinite {
                context: format!("Euler step {i}: state"),
            });
        }
        velocities.push(u);
        states.push(Var::constant(next));
    }
    Ok(Rollout {
        grid: *grid,
        states,
        velocities,
        log_density,
        randomized_from: n1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlpConfig, ParamSet};
    use crate::rng::stream;

    fn tiny(d: usize) -> MlpConfig {
        MlpConfig::new(d).with_hidden(vec![6])
    }

    /// A network whose output is the constant `c` (zero weights, final bias c).
    fn constant_field(c: &[f64]) -> ParamSet {
        let mut p = ParamSet::zeros(&tiny(c.len())).unwrap();
        p.replace("b1", Tensor::vector(c.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn grid_split_and_t0() {
        let g = TimeGrid::from_t0(75, 0.8).unwrap();
        assert_eq!((g.n1(), g.n2()), (60, 15));
        assert!((g.t0() - 0.8).abs() < 1e-12);
        assert!(TimeGrid::from_t0(75, 0.81).is_err());
        assert!(TimeGrid::from_t0(75, 1.0).is_err());
        assert!(TimeGrid::new(0).is_err());
        assert_eq!(TimeGrid::new(4).unwrap().time(4), 1.0);
    }

    #[test]
    fn interpolant_examples() {
        let x0 = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let x1 = Tensor::vector(vec![2.0, 4.0]).unwrap();
        assert_eq!(interpolant(0.0, &x0, &x1).unwrap(), x0);
        assert_eq!(interpolant(1.0, &x0, &x1).unwrap(), x1);
        assert_eq!(interpolant(0.5, &x0, &x1).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fm_loss_term_examples() {
        let tape = Tape::new();
        let zero = ParamSet::zeros(&tiny(2)).unwrap().constants();
        let x0 = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let x1 = Tensor::vector(vec![4.0, 5.0]).unwrap();
        let l = fm_loss_term(&tape, &zero, &x0, &x1, 0.3).unwrap();
        assert_eq!(l.value().item(), 25.0);

        let exact = constant_field(&[3.0, 4.0]).constants();
        let l = fm_loss_term(&tape, &exact, &x0, &x1, 0.7).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn zero_field_keeps_state() {
        let tape = Tape::new();
        let zero = ParamSet::zeros(&tiny(2)).unwrap();
        let x0 = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let r = sample_deterministic(&tape, &zero.bind(&tape), &x0, &TimeGrid::new(10).unwrap(), true)
            .unwrap();
        assert!(r.states.iter().all(|s| s.value() == &x0));
        assert!(r.satisfies_euler_identity());
    }

    #[test]
    fn constant_field_integrates_to_offset() {
        let tape = Tape::new();
        let p = constant_field(&[1.5, -0.25]);
        let x0 = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        for n in [1, 4, 75] {
            let r = sample_deterministic(&tape, &p.constants(), &x0, &TimeGrid::new(n).unwrap(), false)
                .unwrap();
            let x1 = r.terminal().value().data();
            assert!((x1[0] - 2.0).abs() < 1e-12 && (x1[1] + 1.25).abs() < 1e-12);
            assert!(r.satisfies_euler_identity());
        }
    }

    #[test]
    fn integrate_matches_rollout_terminal() {
        let tape = Tape::new();
        let p = ParamSet::init(&tiny(2), 4).unwrap();
        let x0 = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 2.0]]).unwrap();
        let g = TimeGrid::new(13).unwrap();
        let r = sample_deterministic(&tape, &p.constants(), &x0, &g, false).unwrap();
        assert_eq!(r.terminal().value(), &integrate(&p.constants(), &x0, &g).unwrap());
    }

    #[test]
    fn mean_flow_matches_stitched_deterministic_and_ignores_rng() {
        let tape = Tape::new();
        let cfg = tiny(2);
        let a = ParamSet::init(&cfg, 1).unwrap();
        let b = ParamSet::init(&cfg, 2).unwrap().with_log_sigma(3, 0.1).unwrap();
        let grid = TimeGrid::with_split(4, 3).unwrap();
        let x0 = Tensor::from_rows(&[vec![0.3, -0.4], vec![1.0, 0.0]]).unwrap();
        let r1 = sample_randomized(&tape, &a.constants(), &b.constants(), &x0, &grid, &mut stream(1, "r", 0), false, 1e-4)
            .unwrap();
        let r2 = sample_randomized(&tape, &a.constants(), &b.constants(), &x0, &grid, &mut stream(2, "r", 0), false, 1e-4)
            .unwrap();
        assert_eq!(r1.terminal().value(), r2.terminal().value());
        assert!(r1.log_density.is_empty());
        assert!(r1.satisfies_euler_identity());

        // stitched: a for the first 4 steps, then b
        let mut x = x0.clone();
        for i in 0..7 {
            let p = if i < 4 { &a } else { &b };
            let u = p.velocity_at(&x, grid.time(i)).unwrap();
            x = x.zip_map(&u, |s, v| s + v * grid.dt());
        }
        assert_eq!(&x, r1.terminal().value());
        assert_eq!(&x, &integrate_two(&a.constants(), &b.constants(), &x0, &grid).unwrap());
    }

    #[test]
    fn mean_flow_never_reads_sigma() {
        let tape = Tape::new();
        let cfg = tiny(2);
        let a = ParamSet::init(&cfg, 1).unwrap();
        let b = ParamSet::init(&cfg, 2).unwrap().with_log_sigma(3, 0.1).unwrap();
        let mut c = b.clone();
        c.replace("log_sigma", Tensor::full(&[3, 2], 5.0)).unwrap();
        let grid = TimeGrid::with_split(2, 3).unwrap();
        let x0 = Tensor::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let run = |p: &ParamSet| {
            sample_randomized(&tape, &a.constants(), &p.constants(), &x0, &grid, &mut stream(0, "r", 0), false, 1e-4)
                .unwrap()
                .terminal()
                .value()
                .clone()
        };
        assert_eq!(run(&b), run(&c));
    }

    #[test]
    fn randomized_rollout_records_log_density_per_late_step() {
        let tape = Tape::new();
        let cfg = tiny(2);
        let a = ParamSet::init(&cfg, 1).unwrap();
        let b = ParamSet::init(&cfg, 2).unwrap().with_log_sigma(3, 0.1).unwrap();
        let grid = TimeGrid::with_split(4, 3).unwrap();
        let x0 = Tensor::from_rows(&[vec![0.3, -0.4], vec![1.0, 0.0]]).unwrap();
        let r = sample_randomized(&tape, &a.constants(), &b.bind(&tape), &x0, &grid, &mut stream(1, "r", 0), true, 1e-4)
            .unwrap();
        assert_eq!(r.log_density.len(), 3);
        assert!(r.log_density.iter().all(|l| l.shape() == [2] && l.is_tracked()));
        assert!(r.satisfies_euler_identity());
        let tr = r.trajectory(1);
        assert_eq!(tr.states.shape(), &[8, 2]);
        assert_eq!(tr.log_density.len(), 3);
        assert!(tr.log_density.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigma_floor_bounds_log_density() {
        let tape = Tape::new();
        let cfg = tiny(1);
        let a = ParamSet::zeros(&cfg).unwrap();
        let mut b = ParamSet::zeros(&cfg).unwrap().with_log_sigma(1, 0.1).unwrap();
        b.replace("log_sigma", Tensor::full(&[1, 1], -200.0)).unwrap();
        let grid = TimeGrid::with_split(0, 1).unwrap();
        let x0 = Tensor::zeros(&[4, 1]);
        let r = sample_randomized(&tape, &a.constants(), &b.constants(), &x0, &grid, &mut stream(3, "r", 0), true, 1e-4)
            .unwrap();
        // sigma clamps to 1e-4, so the log-density is finite and bounded
        let bound = -(1e-4f64).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(r.log_density[0].value().data().iter().all(|&l| l <= bound + 1e-9));
        assert!(sample_randomized(&tape, &a.constants(), &b.constants(), &x0, &grid, &mut stream(3, "r", 0), true, 0.0)
            .is_err());
    }

    #[test]
    fn randomized_needs_split_grid() {
        let tape = Tape::new();
        let a = ParamSet::zeros(&tiny(1)).unwrap();
        let x0 = Tensor::zeros(&[1, 1]);
        let g = TimeGrid::new(3).unwrap();
        assert!(sample_randomized(&tape, &a.constants(), &a.constants(), &x0, &g, &mut stream(0, "r", 0), false, 1e-4)
            .is_err());
    }
}
