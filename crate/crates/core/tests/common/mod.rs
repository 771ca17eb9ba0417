//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code under test for the quantity being
//! checked.

#![allow(dead_code)]

use std::f64::consts::PI;

use cafm::autodiff::Tape;
use cafm::constraints::ConstraintSet;
use cafm::flow::{self, FmBatch, TimeGrid};
use cafm::model::{Activation, MlpConfig, ParamSet, TimeEmbedding};
use cafm::rng;
use cafm::tensor::Tensor;

/// Brute-force distance on an `n x n` grid over `[lo, hi]^2`: the minimum
/// over in-set grid points of the Euclidean distance to `x`. Also returns
/// the resolution, one cell diagonal: the nearest in-set grid point can be a
/// full cell away from the nearest point of the set.
pub fn grid_distance(c: &ConstraintSet, x: [f64; 2], lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let z = [lo + i as f64 * h, lo + j as f64 * h];
            if c.contains(&z).unwrap() {
                best = best.min(((x[0] - z[0]).powi(2) + (x[1] - z[1]).powi(2)).sqrt());
            }
        }
    }
    (best, h * std::f64::consts::SQRT_2)
}

/// Sliced `W_p` in 2-D over `k` evenly spaced angles in `[0, pi)`, by
/// sorting projections and pairing order statistics (equal sizes only).
pub fn dense_swd_2d(a: &[[f64; 2]], b: &[[f64; 2]], p: f64, k: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for i in 0..k {
        let th = PI * (i as f64 + 0.5) / k as f64;
        let (c, s) = (th.cos(), th.sin());
        let proj = |v: &[[f64; 2]]| {
            let mut out: Vec<f64> = v.iter().map(|x| c * x[0] + s * x[1]).collect();
            out.sort_by(|x, y| x.partial_cmp(y).unwrap());
            out
        };
        let (pa, pb) = (proj(a), proj(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / pa.len() as f64;
    }
    (total / k as f64).powf(1.0 / p)
}

pub fn rows(t: &Tensor) -> Vec<[f64; 2]> {
    (0..t.rows()).map(|r| [t.row(r)[0], t.row(r)[1]]).collect()
}

/// A network computing exactly `u(x, t) = x` in `d` dimensions:
/// `relu(x) - relu(-x)`.
pub fn identity_field(d: usize) -> ParamSet {
    let cfg = MlpConfig {
        input_dim: d,
        hidden: vec![2 * d],
        activation: Activation::Relu,
        time_embedding: TimeEmbedding::Raw,
    };
    let mut p = ParamSet::zeros(&cfg).unwrap();
    let mut w0 = vec![0.0; (d + 1) * 2 * d];
    for j in 0..d {
        w0[j * 2 * d + j] = 1.0;
        w0[j * 2 * d + d + j] = -1.0;
    }
    let mut w1 = vec![0.0; 2 * d * d];
    for j in 0..d {
        w1[j * d + j] = 1.0;
        w1[(d + j) * d + j] = -1.0;
    }
    p.replace("w0", Tensor::matrix(d + 1, 2 * d, w0).unwrap()).unwrap();
    p.replace("w1", Tensor::matrix(2 * d, d, w1).unwrap()).unwrap();
    p
}

/// Terminal error of Euler on `dx/dt = x` from `x0` with `n` steps, against
/// the exact `x0 * e`.
pub fn euler_error(x0: &[f64], n: usize) -> f64 {
    let d = x0.len();
    let p = identity_field(d);
    let x = Tensor::matrix(1, d, x0.to_vec()).unwrap();
    let out = flow::integrate(&p.constants(), &x, &TimeGrid::new(n).unwrap()).unwrap();
    out.data()
        .iter()
        .zip(x0)
        .map(|(a, b)| (a - b * std::f64::consts::E).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub struct JensenResult {
    pub gap: f64,
    pub se: f64,
    pub sigma_sq: f64,
}

/// Randomized minus mean-velocity FM loss on one fixed batch, averaged over
/// `draws` noise draws, against the closed form: the batch mean of
/// `|sigma_step|^2`.
pub fn jensen_gap(draws: usize, seed: u64) -> JensenResult {
    let d = 2;
    let cfg = MlpConfig::new(d).with_hidden(vec![16]);
    let steps = 10;
    let p = ParamSet::init(&cfg, seed).unwrap().with_log_sigma(3, 1.0).unwrap();
    let log_sigma = Tensor::matrix(3, d, vec![-1.0, -0.3, 0.2, -2.0, 0.5, -0.7]).unwrap();
    let mut p = p;
    p.replace(cafm::model::LOG_SIGMA, log_sigma.clone()).unwrap();
    let b = 8;
    let mut r = rng::stream(seed, "jensen.batch", 0);
    let x0 = rng::standard_normal(&mut r, &[b, d]);
    let x1 = rng::standard_normal(&mut r, &[b, d]);
    let idx: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let t: Vec<f64> = idx.iter().map(|&k| (7 + k) as f64 / steps as f64).collect();
    let batch = FmBatch::new(x0, x1, t).unwrap();
    let bound = p.constants();
    let tape = Tape::new();
    let mean_loss = flow::fm_loss(&tape, &bound, &batch).unwrap().value().item();
    let mut gaps = Vec::with_capacity(draws);
    for k in 0..draws {
        let eps = rng::standard_normal(&mut rng::stream(seed, "jensen.eps", k as u64), &[b, d]);
        let tape = Tape::new();
        let l = flow::randomized_fm_loss(&tape, &bound, &batch, &idx, &eps, 1e-12).unwrap();
        gaps.push(l.value().item() - mean_loss);
    }
    let n = draws as f64;
    let gap = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - gap).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma_sq = idx
        .iter()
        .map(|&k| log_sigma.row(k).iter().map(|l| (2.0 * l).exp()).sum::<f64>())
        .sum::<f64>()
        / b as f64;
    JensenResult {
        gap,
        se: (var / n).sqrt(),
        sigma_sq,
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Closed-form gradients of `P(mu + sigma * eps >= a)` in `mu` and `log sigma`.
pub fn pg_truth(mu: f64, sigma: f64, a: f64) -> (f64, f64) {
    use statrs::distribution::{Continuous, Normal};
    let z = (a - mu) / sigma;
    let phi = Normal::new(0.0, 1.0).unwrap().pdf(z);
    (phi / sigma, z * phi)
}
