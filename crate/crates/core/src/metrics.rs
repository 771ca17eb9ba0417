//! Sample-quality metrics: sliced Wasserstein distance, violation rate, mean
//! distance to the constraint set, and aggregation over repeated trials.

use std::fmt::Write as _;
use std::thread;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwdSettings {
    pub projections: usize,
    pub p: f64,
}

impl Default for SwdSettings {
    fn default() -> Self {
        SwdSettings {
            projections: 256,
            p: 2.0,
        }
    }
}

/// A uniformly random direction on the unit sphere in R^d.
pub fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn project_sorted(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = (0..x.rows())
        .map(|r| x.row(r).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Quantile of sorted samples at level `q` in (0, 1), linear between the
/// midpoints `(i + 0.5) / n` of consecutive order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = (q * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// `W_p^p` between two 1-D empirical distributions given sorted samples.
/// Equal sizes pair order statistics; otherwise both quantile functions are
/// evaluated at `max(n, m)` midpoint levels.
pub fn wasserstein_1d_pow(a: &[f64], b: &[f64], p: f64) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / a.len() as f64;
    }
    let k = a.len().max(b.len());
    (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            (quantile(a, q) - quantile(b, q)).abs().powf(p)
        })
        .sum::<f64>()
        / k as f64
}

/// Mean of `W_p^p` over the given directions, then the p-th root.
pub fn swd_with_directions(a: &Tensor, b: &Tensor, dirs: &[Vec<f64>], p: f64) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("swd", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 || b.rows() == 0 || dirs.is_empty() || !(p >= 1.0) {
        return Err(Error::InvalidArgument(
            "swd needs non-empty samples, >= 1 projection and p >= 1".into(),
        ));
    }
    let total: f64 = dirs
        .iter()
        .map(|dir| wasserstein_1d_pow(&project_sorted(a, dir), &project_sorted(b, dir), p))
        .sum();
    Ok((total / dirs.len() as f64).powf(1.0 / p))
}

/// Sliced Wasserstein distance over `projections` random directions from `rng`.
pub fn swd<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, settings: SwdSettings, rng: &mut R) -> Result<f64> {
    if a.rank() != 2 {
        return Err(Error::shape("swd", format!("{:?}", a.shape())));
    }
    let dirs: Vec<Vec<f64>> = (0..settings.projections)
        .map(|_| random_direction(a.cols(), rng))
        .collect();
    swd_with_directions(a, b, &dirs, settings.p)
}

/// Fraction of rows outside `c`.
pub fn violation_rate(samples: &Tensor, c: &ConstraintSet) -> Result<f64> {
    let inside = c.contains_batch(samples)?;
    if inside.is_empty() {
        return Ok(0.0);
    }
    Ok(inside.iter().filter(|&&b| !b).count() as f64 / inside.len() as f64)
}

pub fn mean_set_distance(samples: &Tensor, c: &ConstraintSet) -> Result<f64> {
    if !c.has_distance() {
        return Err(Error::DistanceUnavailable(c.name().into()));
    }
    let n = samples.rows();
    let mut total = 0.0;
    for r in 0..n {
        total += c.distance_value(samples.row(r))?;
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialResult {
    pub swd: f64,
    pub violation: f64,
    pub distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSummary {
    pub trials: Vec<TrialResult>,
    pub swd_mean: f64,
    pub swd_std: f64,
    pub viol_mean: f64,
    pub viol_std: f64,
    pub dist_mean: Option<f64>,
    /// Set when only one trial ran, so the stds are 0 by convention.
    pub single_trial: bool,
}

pub const METRICS_HEADER: &str = "method,task,swd_mean,swd_std,viol_mean,viol_std,dist_mean";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl MetricsSummary {
    pub fn from_trials(trials: Vec<TrialResult>) -> MetricsSummary {
        let swd: Vec<f64> = trials.iter().map(|t| t.swd).collect();
        let viol: Vec<f64> = trials.iter().map(|t| t.violation).collect();
        let (swd_mean, swd_std) = mean_std(&swd);
        let (viol_mean, viol_std) = mean_std(&viol);
        let dist: Option<Vec<f64>> = trials.iter().map(|t| t.distance).collect();
        MetricsSummary {
            swd_mean,
            swd_std,
            viol_mean,
            viol_std,
            dist_mean: dist.map(|d| mean_std(&d).0),
            single_trial: trials.len() == 1,
            trials,
        }
    }

    /// Standard error of the mean violation rate.
    pub fn viol_se(&self) -> f64 {
        self.viol_std / (self.trials.len() as f64).sqrt()
    }

    /// One CSV row in [`METRICS_HEADER`] order; `dist_mean` is empty when the
    /// set has no distance.
    pub fn csv_row(&self, method: &str, task: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{method},{task},{:e},{:e},{:e},{:e},",
            self.swd_mean, self.swd_std, self.viol_mean, self.viol_std
        );
        if let Some(d) = self.dist_mean {
            let _ = write!(s, "{d:e}");
        }
        s
    }
}

/// Generator of `n` samples for trial `k`, given the trial's rng.
pub type TrialSampler<'a> = dyn Fn(usize, &mut StreamRng) -> Result<Tensor> + Sync + 'a;

/// Runs `trials` independent generations of `n` samples and aggregates SWD
/// against `reference`, violation rate and (when available) mean distance.
///
/// Trial `k` draws from stream `(seed, "eval.sample", k)`; all trials share
/// one projection set drawn from `(seed, "eval.swd", 0)`. Trials are split over `workers` threads; results
/// are merged in trial order, so output does not depend on `workers`.
pub fn evaluate_trials(
    sampler: &TrialSampler<'_>,
    c: &ConstraintSet,
    reference: &Tensor,
    trials: usize,
    n: usize,
    seed: u64,
    swd_settings: SwdSettings,
    workers: usize,
) -> Result<MetricsSummary> {
    if trials == 0 || n == 0 {
        return Err(Error::InvalidArgument("evaluation needs trials >= 1 and n >= 1".into()));
    }
    if reference.rank() != 2 {
        return Err(Error::shape("evaluate", format!("reference {:?}", reference.shape())));
    }
    let mut prng = rng::stream(seed, "eval.swd", 0);
    let dirs: Vec<Vec<f64>> = (0..swd_settings.projections)
        .map(|_| random_direction(reference.cols(), &mut prng))
        .collect();
    let run = |k: usize| -> Result<TrialResult> {
        let x = sampler(n, &mut rng::stream(seed, "eval.sample", k as u64))?;
        let swd = swd_with_directions(&x, reference, &dirs, swd_settings.p)?;
        let violation = violation_rate(&x, c)?;
        let distance = if c.has_distance() {
            Some(mean_set_distance(&x, c)?)
        } else {
            None
        };
        Ok(TrialResult {
            swd,
            violation,
            distance,
        })
    };
    let workers = workers.clamp(1, trials);
    let results: Vec<Result<TrialResult>> = if workers == 1 {
        (0..trials).map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<TrialResult>>> = (0..trials).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    s.spawn(move || {
                        (w..trials)
                            .step_by(workers)
                            .map(|k| (k, run(k)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (k, r) in h.join().expect("evaluation worker panicked") {
                    slots[k] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every trial ran")).collect()
    };
    Ok(MetricsSummary::from_trials(results.into_iter().collect::<Result<_>>()?))
}
