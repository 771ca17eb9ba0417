//! Gradient self-checks: every tape op and the composite losses against
//! central finite differences, and the policy-gradient estimator against the
//! closed form of a one-step Gaussian toy.

use std::fmt;

use rand::Rng;

use crate::autodiff::{GradFault, Tape, Var};
use crate::constraints::ConstraintSet;
use crate::error::Result;
use crate::flow::{self, FmBatch, TimeGrid};
use crate::model::{Activation, MlpConfig, ParamSet, TimeEmbedding};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;
use crate::training;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} measured {:.3e}  tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

type OpFn = fn(&Tape, &[Var]) -> Result<Var>;
type InputFn = fn(&mut StreamRng) -> Vec<Tensor>;

fn normal(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    rng::standard_normal(rng, shape)
}

/// Normal entries pushed at least `margin` away from `kink`.
fn away(rng: &mut StreamRng, shape: &[usize], kink: f64, margin: f64) -> Tensor {
    normal(rng, shape).map(|v| {
        let v = v + kink;
        if v >= kink {
            v + margin
        } else {
            v - margin
        }
    })
}

fn positive(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    normal(rng, shape).map(|v| v.abs() + 0.2)
}

/// A fixed action for the log-density cases; it is data, not an input.
fn action(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|k| (k as f64 + 1.0).sin()).collect())
}

/// `sum(f(inputs) * w)` for a fixed weight `w`.
fn weighted(tape: &Tape, f: OpFn, inputs: &[Var], w: &Tensor) -> Result<Var> {
    let y = f(tape, inputs)?;
    let w = Var::constant(w.reshape(y.shape().to_vec())?);
    tape.sum(&tape.mul(&y, &w)?)
}

/// Worst relative error of one op over `seeds` random inputs.
fn op_error(tag: &str, inputs: InputFn, f: OpFn, seeds: usize, fault: Option<GradFault>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let mut rng = rng::stream(0, &format!("gradcheck.{tag}"), s as u64);
        let xs = inputs(&mut rng);
        let tape = match fault {
            Some(k) => Tape::with_fault(k),
            None => Tape::new(),
        };
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let n_out = f(&Tape::new(), &xs.iter().cloned().map(Var::constant).collect::<Vec<_>>())?
            .value()
            .len();
        let w = Tensor::from_parts(vec![n_out], (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect());
        let loss = weighted(&tape, f, &vars, &w)?;
        let grads = tape.backward(&loss)?;
        let eval = |xs: &[Tensor]| -> Result<f64> {
            let t = Tape::new();
            let v: Vec<Var> = xs.iter().cloned().map(Var::constant).collect();
            Ok(weighted(&t, f, &v, &w)?.value().item())
        };
        for (i, v) in vars.iter().enumerate() {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()));
            for j in 0..xs[i].len() {
                let mut plus = xs.clone();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = xs.clone();
                minus[i].data_mut()[j] -= FD_STEP;
                let num = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(g.data()[j], num));
            }
        }
    }
    Ok(worst)
}

fn op_cases() -> Vec<(&'static str, InputFn, OpFn)> {
    vec![
        ("add", |r| vec![normal(r, &[3, 2]), normal(r, &[3, 2])], |t, v| t.add(&v[0], &v[1])),
        ("sub", |r| vec![normal(r, &[3, 2]), normal(r, &[3, 2])], |t, v| t.sub(&v[0], &v[1])),
        ("mul", |r| vec![normal(r, &[3, 2]), normal(r, &[3, 2])], |t, v| t.mul(&v[0], &v[1])),
        ("matmul", |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2])], |t, v| t.matmul(&v[0], &v[1])),
        (
            "affine",
            |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2]), normal(r, &[2])],
            |t, v| t.affine(&v[0], &v[1], &v[2]),
        ),
        ("tanh", |r| vec![normal(r, &[5])], |t, v| t.tanh(&v[0])),
        ("relu", |r| vec![away(r, &[5], 0.0, 0.01)], |t, v| t.relu(&v[0])),
        ("exp", |r| vec![normal(r, &[5])], |t, v| t.exp(&v[0])),
        ("log", |r| vec![positive(r, &[5])], |t, v| t.log(&v[0])),
        ("sqrt", |r| vec![positive(r, &[5])], |t, v| t.sqrt(&v[0])),
        ("abs", |r| vec![away(r, &[5], 0.0, 0.01)], |t, v| t.abs(&v[0])),
        ("sin", |r| vec![normal(r, &[5])], |t, v| t.sin(&v[0])),
        ("cos", |r| vec![normal(r, &[5])], |t, v| t.cos(&v[0])),
        ("square", |r| vec![normal(r, &[5])], |t, v| t.square(&v[0])),
        ("scale", |r| vec![normal(r, &[5])], |t, v| t.scale(&v[0], -1.7)),
        ("neg", |r| vec![normal(r, &[5])], |t, v| t.neg(&v[0])),
        ("add_scalar", |r| vec![normal(r, &[5])], |t, v| t.add_scalar(&v[0], 0.3)),
        ("clamp_min", |r| vec![away(r, &[5], 0.3, 0.01)], |t, v| t.clamp_min(&v[0], 0.3)),
        ("sum", |r| vec![normal(r, &[3, 2])], |t, v| t.sum(&v[0])),
        ("mean", |r| vec![normal(r, &[3, 2])], |t, v| t.mean(&v[0])),
        ("sum_rows", |r| vec![normal(r, &[3, 2])], |t, v| t.sum_rows(&v[0])),
        (
            "broadcast_add",
            |r| vec![normal(r, &[3, 2]), normal(r, &[2])],
            |t, v| t.broadcast_add(&v[0], &v[1]),
        ),
        (
            "concat",
            |r| vec![normal(r, &[3, 2]), normal(r, &[3, 1])],
            |t, v| t.concat(&[&v[0], &v[1]]),
        ),
        ("slice", |r| vec![normal(r, &[3, 4])], |t, v| t.slice(&v[0], 1, 3)),
        ("reshape", |r| vec![normal(r, &[3, 2])], |t, v| t.reshape(&v[0], vec![2, 3])),
        ("gather_rows", |r| vec![normal(r, &[3, 2])], |t, v| t.gather_rows(&v[0], &[2, 0, 2])),
        (
            "gaussian_log_pdf",
            |r| vec![normal(r, &[3]), positive(r, &[3])],
            |t, v| t.gaussian_log_pdf(&action(&[3]), &v[0], &v[1]),
        ),
        (
            "gaussian_log_pdf_rows",
            |r| vec![normal(r, &[4, 2]), positive(r, &[4, 2])],
            |t, v| t.gaussian_log_pdf_rows(&action(&[4, 2]), &v[0], &v[1]),
        ),
        (
            "gaussian_log_pdf_shared",
            |r| vec![normal(r, &[4, 2]), positive(r, &[2])],
            |t, v| t.gaussian_log_pdf_rows(&action(&[4, 2]), &v[0], &v[1]),
        ),
        (
            "box_distance",
            |r| vec![away(r, &[6, 2], 0.0, 0.01).map(|v| 3.0 * v)],
            |t, v| ConstraintSet::new_box(vec![-1.0, -2.0], vec![1.0, 0.5])?.distance(t, &v[0]),
        ),
        (
            "two_boxes_distance",
            |r| vec![away(r, &[6, 2], 0.0, 0.01).map(|v| 3.0 * v)],
            |t, v| ConstraintSet::two_boxes(1.0, 5.0)?.distance(t, &v[0]),
        ),
        (
            "ball_distance",
            |r| vec![normal(r, &[6, 3]).map(|v| 2.0 * v)],
            |t, v| ConstraintSet::ball(3, 1.0)?.distance(t, &v[0]),
        ),
        (
            "hyperplane_distance",
            |r| vec![normal(r, &[6, 3])],
            |t, v| ConstraintSet::hyperplane(vec![1.0, -2.0, 0.5], 0.7, 1e-3)?.distance(t, &v[0]),
        ),
        (
            "sigma_rows",
            |r| vec![normal(r, &[3, 2])],
            |t, v| flow::sigma_rows(t, &v[0], &[1, 0, 1], 1e-4),
        ),
    ]
}

fn tiny_mlp(embedding: TimeEmbedding, activation: Activation) -> MlpConfig {
    MlpConfig {
        input_dim: 2,
        hidden: vec![3, 3],
        activation,
        time_embedding: embedding,
    }
}

/// Random parameters, biases included (init leaves them at zero).
fn random_params(cfg: &MlpConfig, rng: &mut StreamRng) -> Result<ParamSet> {
    let p = ParamSet::init(cfg, 0)?;
    let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.unflatten(&flat)
}

/// Worst relative error of a scalar function of the parameters.
fn param_error(
    params: &ParamSet,
    fault: Option<GradFault>,
    f: &dyn Fn(&Tape, &crate::model::BoundParams) -> Result<Var>,
) -> Result<f64> {
    param_error_split(params, fault, f, f)
}

/// As [`param_error`], with the numeric side computed by a separate
/// function of the same value.
fn param_error_split(
    params: &ParamSet,
    fault: Option<GradFault>,
    f: &dyn Fn(&Tape, &crate::model::BoundParams) -> Result<Var>,
    numeric: &dyn Fn(&Tape, &crate::model::BoundParams) -> Result<Var>,
) -> Result<f64> {
    let tape = match fault {
        Some(k) => Tape::with_fault(k),
        None => Tape::new(),
    };
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<f64> = bound.gradients(&grads).iter().flat_map(|g| g.data().to_vec()).collect();
    let flat = params.flatten();
    let eval = |flat: &[f64]| -> Result<f64> {
        let t = Tape::new();
        Ok(numeric(&t, &params.unflatten(flat)?.constants())?.value().item())
    };
    let mut worst: f64 = 0.0;
    for j in 0..flat.len() {
        let mut plus = flat.clone();
        plus[j] += FD_STEP;
        let mut minus = flat.clone();
        minus[j] -= FD_STEP;
        let num = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[j], num));
    }
    Ok(worst)
}

fn mlp_output_error(seeds: usize, embedding: TimeEmbedding, fault: Option<GradFault>) -> Result<f64> {
    let cfg = tiny_mlp(embedding, Activation::Tanh);
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let mut rng = rng::stream(0, "gradcheck.mlp", s as u64);
        let p = random_params(&cfg, &mut rng)?;
        let x = normal(&mut rng, &[3, 2]);
        let t: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = normal(&mut rng, &[3, 2]);
        let f = |tape: &Tape, b: &crate::model::BoundParams| -> Result<Var> {
            let u = b.velocity(tape, &Var::constant(x.clone()), &Var::constant(Tensor::from_parts(vec![3], t.clone())))?;
            tape.sum(&tape.mul(&u, &Var::constant(w.clone()))?)
        };
        worst = worst.max(param_error(&p, fault, &f)?);
    }
    Ok(worst)
}

/// Jacobian of the network output with respect to `x` and `t`.
fn mlp_input_error(seeds: usize, fault: Option<GradFault>) -> Result<f64> {
    let cfg = tiny_mlp(TimeEmbedding::Sinusoidal(2), Activation::Tanh);
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let mut rng = rng::stream(0, "gradcheck.mlp_input", s as u64);
        let p = random_params(&cfg, &mut rng)?.constants();
        let x = normal(&mut rng, &[3, 2]);
        let t = Tensor::from_parts(vec![3], (0..3).map(|_| rng.random_range(0.1..0.9)).collect());
        let w = normal(&mut rng, &[3, 2]);
        let f = |tape: &Tape, x: &Var, t: &Var| -> Result<f64> {
            let u = p.velocity(tape, x, t)?;
            Ok(tape.sum(&tape.mul(&u, &Var::constant(w.clone()))?)?.value().item())
        };
        let tape = match fault {
            Some(k) => Tape::with_fault(k),
            None => Tape::new(),
        };
        let (xv, tv) = (tape.leaf(x.clone()), tape.leaf(t.clone()));
        let u = p.velocity(&tape, &xv, &tv)?;
        let loss = tape.sum(&tape.mul(&u, &Var::constant(w.clone()))?)?;
        let g = tape.backward(&loss)?;
        for (input, var, is_x) in [(&x, &xv, true), (&t, &tv, false)] {
            let ga = g.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()));
            for j in 0..input.len() {
                let mut plus = input.clone();
                plus.data_mut()[j] += FD_STEP;
                let mut minus = input.clone();
                minus.data_mut()[j] -= FD_STEP;
                let t0 = Tape::new();
                let (fp, fm) = if is_x {
                    (
                        f(&t0, &Var::constant(plus), &Var::constant(t.clone()))?,
                        f(&t0, &Var::constant(minus), &Var::constant(t.clone()))?,
                    )
                } else {
                    (
                        f(&t0, &Var::constant(x.clone()), &Var::constant(plus))?,
                        f(&t0, &Var::constant(x.clone()), &Var::constant(minus))?,
                    )
                };
                worst = worst.max(rel_err(ga.data()[j], (fp - fm) / (2.0 * FD_STEP)));
            }
        }
    }
    Ok(worst)
}

fn loss_errors(seeds: usize, fault: Option<GradFault>) -> Result<Vec<(&'static str, f64)>> {
    let cfg = tiny_mlp(TimeEmbedding::Raw, Activation::Tanh);
    let mut worst = [0.0f64; 4];
    let c = ConstraintSet::new_box(vec![-0.5, -0.5], vec![0.5, 0.5])?;
    for s in 0..seeds {
        let mut rng = rng::stream(0, "gradcheck.losses", s as u64);
        let steps = 4;
        let p = random_params(&cfg, &mut rng)?.with_log_sigma(2, 0.5)?;
        let x0 = normal(&mut rng, &[3, 2]);
        let x1 = normal(&mut rng, &[3, 2]);
        let t: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let batch = FmBatch::new(x0.clone(), x1.clone(), t.clone())?;
        let eps = normal(&mut rng, &[3, 2]);
        let grid = TimeGrid::new(steps)?;
        let idx = [0usize, 1, 1];
        worst[0] = worst[0].max(param_error(&p, fault, &|tape, b| flow::fm_loss(tape, b, &batch))?);
        worst[1] = worst[1].max(param_error(&p, fault, &|tape, b| {
            flow::randomized_fm_loss(tape, b, &batch, &idx, &eps, 1e-4)
        })?);
        worst[2] = worst[2].max(param_error(&p, fault, &|tape, b| {
            Ok(training::fmdd_loss(tape, b, &batch, &c, 3.0, &grid)?.0)
        })?);
        let split = TimeGrid::with_split(2, 2)?;
        let frozen = p.constants();
        let u = normal(&mut rng, &[3, 2]);
        // Score-function check: the recorded log-density graph against the
        // log-density of the recorded actions, states held fixed.
        let w = u.slice_col(0);
        let noise = || rng::stream(s as u64, "gradcheck.rollout", 0);
        let rec = flow::sample_randomized(&Tape::new(), &frozen, &p.constants(), &x0, &split, &mut noise(), true, 1e-4)?;
        let recorded = |tape: &Tape, b: &crate::model::BoundParams| -> Result<Var> {
            let r = flow::sample_randomized(tape, &frozen, b, &x0, &split, &mut noise(), true, 1e-4)?;
            let mut total = r.log_density[0].clone();
            for l in &r.log_density[1..] {
                total = tape.add(&total, l)?;
            }
            tape.sum(&tape.mul(&total, &Var::constant(w.clone()))?)
        };
        let direct = |tape: &Tape, b: &crate::model::BoundParams| -> Result<Var> {
            let ls = b.log_sigma().expect("log_sigma present");
            let mut total: Option<Var> = None;
            for k in 0..split.n2() {
                let i = split.n1() + k;
                let x = Var::constant(rec.states[i].value().clone());
                let t = Var::constant(Tensor::full(&[3], split.time(i)));
                let mu = b.velocity(tape, &x, &t)?;
                let sigma = flow::sigma_at(tape, ls, k, 1e-4)?;
                let lp = tape.gaussian_log_pdf_rows(&rec.velocities[i], &mu, &sigma)?;
                total = Some(match total {
                    Some(acc) => tape.add(&acc, &lp)?,
                    None => lp,
                });
            }
            tape.sum(&tape.mul(&total.expect("n2 >= 1"), &Var::constant(w.clone()))?)
        };
        worst[3] = worst[3].max(param_error_split(&p, fault, &recorded, &direct)?);
    }
    Ok(vec![
        ("fm_loss", worst[0]),
        ("randomized_fm_loss", worst[1]),
        ("fmdd_loss", worst[2]),
        ("trajectory_log_density", worst[3]),
    ])
}

trait FirstColumn {
    fn slice_col(&self, j: usize) -> Tensor;
}

impl FirstColumn for Tensor {
    fn slice_col(&self, j: usize) -> Tensor {
        Tensor::from_parts(vec![self.rows()], (0..self.rows()).map(|r| self.row(r)[j]).collect())
    }
}

/// The finite-difference suite over `seeds` random draws per case.
pub fn finite_difference_suite(seeds: usize, fault: Option<GradFault>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut push = |name: String, measured: f64| {
        out.push(Check {
            name,
            measured,
            tolerance: FD_TOLERANCE,
            passed: measured <= FD_TOLERANCE,
        })
    };
    for (name, inputs, f) in op_cases() {
        push(format!("fd/{name}"), op_error(name, inputs, f, seeds, fault)?);
    }
    push("fd/mlp_raw".into(), mlp_output_error(seeds, TimeEmbedding::Raw, fault)?);
    push(
        "fd/mlp_sinusoidal".into(),
        mlp_output_error(seeds, TimeEmbedding::Sinusoidal(3), fault)?,
    );
    push("fd/mlp_input".into(), mlp_input_error(seeds, fault)?);
    for (name, e) in loss_errors(seeds.div_ceil(10), fault)? {
        push(format!("fd/{name}"), e);
    }
    Ok(out)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Policy-gradient estimate on the one-step toy `x1 = mu + sigma * eps`,
/// `C = [a, inf)`, with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgToyResult {
    pub mu: f64,
    pub sigma: f64,
    pub a: f64,
    pub d_mu: f64,
    pub d_mu_se: f64,
    pub d_log_sigma: f64,
    pub d_log_sigma_se: f64,
}

impl PgToyResult {
    /// Closed forms `phi(z) / sigma` and `z * phi(z)`, `z = (a - mu) / sigma`.
    pub fn truth(&self) -> (f64, f64) {
        let z = (self.a - self.mu) / self.sigma;
        (normal_pdf(z) / self.sigma, z * normal_pdf(z))
    }

    /// Largest deviation from the closed form in standard errors.
    pub fn z_scores(&self) -> (f64, f64) {
        let (tm, ts) = self.truth();
        (
            (self.d_mu - tm).abs() / self.d_mu_se,
            (self.d_log_sigma - ts).abs() / self.d_log_sigma_se,
        )
    }
}

/// Runs `batches` rollouts of `batch` trajectories through the real
/// randomized sampler: a zero-weight network whose output bias is `mu`, one
/// Euler step of length 1 from `x0 = 0`, and `log_sigma = ln(sigma)`.
#[allow(clippy::too_many_arguments)]
pub fn pg_toy(
    mu: f64,
    sigma: f64,
    a: f64,
    batches: usize,
    batch: usize,
    baseline: bool,
    seed: u64,
    fault: Option<GradFault>,
) -> Result<PgToyResult> {
    let cfg = MlpConfig {
        input_dim: 1,
        hidden: vec![2],
        activation: Activation::Relu,
        time_embedding: TimeEmbedding::Raw,
    };
    let mut p = ParamSet::zeros(&cfg)?.with_log_sigma(1, sigma)?;
    p.replace("b1", Tensor::full(&[1], mu))?;
    let first = p.constants();
    let c = ConstraintSet::new_box(vec![a], vec![a + 1e6])?;
    let grid = TimeGrid::with_split(0, 1)?;
    let x0 = Tensor::zeros(&[batch, 1]);
    let mut gm = Vec::with_capacity(batches);
    let mut gs = Vec::with_capacity(batches);
    for k in 0..batches {
        let tape = match fault {
            Some(f) => Tape::with_fault(f),
            None => Tape::new(),
        };
        let bound = p.bind(&tape);
        let mut noise = rng::stream(seed, "pg_toy", k as u64);
        let r = flow::sample_randomized(&tape, &first, &bound, &x0, &grid, &mut noise, true, 1e-12)?;
        let g = training::pg_gradient(&tape, &r, &c, baseline)?;
        let grads = bound.gradients(&g);
        let names = p.names();
        let at = |name: &str| grads[names.iter().position(|n| n == name).expect("known name")].data()[0];
        gm.push(at("b1"));
        gs.push(at(crate::model::LOG_SIGMA));
    }
    let mean_se = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    };
    let (d_mu, d_mu_se) = mean_se(&gm);
    let (d_log_sigma, d_log_sigma_se) = mean_se(&gs);
    Ok(PgToyResult {
        mu,
        sigma,
        a,
        d_mu,
        d_mu_se,
        d_log_sigma,
        d_log_sigma_se,
    })
}

/// The full self-check: finite differences over 100 seeds per case, and
/// the policy-gradient toy at 3 standard errors.
pub fn run(fault: Option<GradFault>) -> Result<Report> {
    let mut checks = finite_difference_suite(100, fault)?;
    let r = pg_toy(0.3, 0.8, 0.5, 100, 1000, false, 11, fault)?;
    let (zm, zs) = r.z_scores();
    for (name, z) in [("pg/d_mu", zm), ("pg/d_log_sigma", zs)] {
        checks.push(Check {
            name: name.into(),
            measured: z,
            tolerance: 3.0,
            passed: z <= 3.0,
        });
    }
    Ok(Report { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let checks = finite_difference_suite(5, None).unwrap();
        for c in &checks {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn sign_flip_is_caught_by_name() {
        let checks = finite_difference_suite(2, Some(GradFault::FlipGaussianLogPdfSign)).unwrap();
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"fd/gaussian_log_pdf"), "{failed:?}");
        assert!(!failed.contains(&"fd/matmul"));
    }

    #[test]
    fn pg_toy_close_to_closed_form() {
        let r = pg_toy(0.0, 1.0, 0.2, 40, 500, false, 3, None).unwrap();
        let (zm, zs) = r.z_scores();
        assert!(zm < 4.0 && zs < 4.0, "{r:?}");
    }
}
