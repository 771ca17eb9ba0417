//! Source noise and the synthetic target distributions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

/// Rejection attempts allowed per accepted point.
pub const MAX_REJECTIONS: u64 = 1_000_000;

pub fn sample_q0<R: Rng + ?Sized>(d: usize, b: usize, rng: &mut R) -> Tensor {
    standard_normal(rng, &[b, d])
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn reject<R: Rng + ?Sized>(
    sampler: &'static str,
    b: usize,
    d: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R, &mut [f64]),
    accept: impl Fn(&[f64]) -> bool,
) -> Result<Tensor> {
    let mut out = vec![0.0; b * d];
    for row in out.chunks_mut(d) {
        let mut tries = 0u64;
        loop {
            if tries == MAX_REJECTIONS {
                return Err(Error::RejectionExhausted {
                    sampler,
                    attempts: tries,
                });
            }
            tries += 1;
            draw(rng, row);
            if accept(row) {
                break;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, d], out))
}

/// Equal-weight mixture of `N((3,3), 0.6 I)` and `N((-3,-3), 1.5 I)` truncated
/// to `[-4, 4]^2`.
pub fn sample_box_gmm<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Result<Tensor> {
    let (s1, s2) = (0.6f64.sqrt(), 1.5f64.sqrt());
    reject(
        "box_gmm",
        b,
        2,
        rng,
        |rng, x| {
            let (m, s) = if rng.random::<bool>() { (3.0, s1) } else { (-3.0, s2) };
            x[0] = m + s * gauss(rng);
            x[1] = m + s * gauss(rng);
        },
        |x| x.iter().all(|v| v.abs() <= 4.0),
    )
}

/// Uniform on `[1,5]^2 ∪ [-5,-1]^2`: a fair coin picks the box.
pub fn sample_two_boxes_uniform<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Tensor {
    let mut out = Vec::with_capacity(2 * b);
    for _ in 0..b {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for _ in 0..2 {
            out.push(sign * rng.random_range(1.0..=5.0));
        }
    }
    Tensor::from_parts(vec![b, 2], out)
}

/// Uniform mixture of `N(e_k, 0.05 I)` over the `d` unit vectors, rejected
/// outside the unit ball.
pub fn sample_ball_gmm<R: Rng + ?Sized>(d: usize, b: usize, rng: &mut R) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::InvalidArgument("ball target needs d >= 1".into()));
    }
    let s = 0.05f64.sqrt();
    reject(
        "ball_gmm",
        b,
        d,
        rng,
        |rng, x| {
            let k = rng.random_range(0..d);
            for (j, v) in x.iter_mut().enumerate() {
                *v = s * gauss(rng) + if j == k { 1.0 } else { 0.0 };
            }
        },
        |x| x.iter().map(|v| v * v).sum::<f64>() <= 1.0,
    )
}

/// Orthogonal projection onto `1^T x + 10 = 0` in R^10.
pub fn project_subspace(x: &mut [f64]) {
    let r = (x.iter().sum::<f64>() + 10.0) / x.len() as f64;
    for v in x.iter_mut() {
        *v -= r;
    }
}

/// `N(0, I_10)` projected onto `1^T x + 10 = 0`.
pub fn sample_subspace_gaussian<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Tensor {
    let mut t = standard_normal(rng, &[b, 10]);
    for row in t.data_mut().chunks_mut(10) {
        project_subspace(row);
    }
    t
}

/// The synthetic tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    BoxGmm,
    TwoBoxes,
    BallGmm(usize),
    Subspace,
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::BoxGmm | Target::TwoBoxes => 2,
            Target::BallGmm(d) => *d,
            Target::Subspace => 10,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Tensor> {
        match self {
            Target::BoxGmm => sample_box_gmm(b, rng),
            Target::TwoBoxes => Ok(sample_two_boxes_uniform(b, rng)),
            Target::BallGmm(d) => sample_ball_gmm(*d, b, rng),
            Target::Subspace => Ok(sample_subspace_gaussian(b, rng)),
        }
    }

    /// The constraint set that contains this target's support.
    pub fn constraint(&self) -> ConstraintSet {
        match self {
            Target::BoxGmm => ConstraintSet::Box {
                lo: vec![-4.0; 2],
                hi: vec![4.0; 2],
            },
            Target::TwoBoxes => ConstraintSet::TwoBoxes {
                inner: 1.0,
                outer: 5.0,
            },
            Target::BallGmm(d) => ConstraintSet::L2Ball {
                dim: *d,
                radius: 1.0,
            },
            Target::Subspace => ConstraintSet::Hyperplane {
                normal: vec![1.0; 10],
                offset: 10.0,
                tol: 5e-4,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn samples_lie_in_their_sets() {
        for t in [Target::BoxGmm, Target::TwoBoxes, Target::BallGmm(8), Target::Subspace] {
            let x = t.sample(2000, &mut stream(1, "t", 0)).unwrap();
            let c = t.constraint();
            assert!(c.contains_batch(&x).unwrap().iter().all(|&b| b), "{t:?}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = sample_box_gmm(10, &mut stream(3, "t", 0)).unwrap();
        let b = sample_box_gmm(10, &mut stream(3, "t", 0)).unwrap();
        let c = sample_box_gmm(10, &mut stream(4, "t", 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn projection_identity_and_idempotence() {
        let x = sample_subspace_gaussian(100, &mut stream(0, "s", 0));
        for r in 0..100 {
            let row = x.row(r);
            assert!((row.iter().sum::<f64>() + 10.0).abs() < 1e-12);
            let mut again = row.to_vec();
            project_subspace(&mut again);
            for (a, b) in again.iter().zip(row) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
