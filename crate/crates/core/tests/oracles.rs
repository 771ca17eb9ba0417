mod common;

use cafm::autodiff::{GradFault, Tape, Var};
use cafm::constraints::ConstraintSet;
use cafm::gradcheck;
use cafm::metrics::{self, random_direction, SwdSettings};
use cafm::model::{MlpConfig, ParamSet};
use cafm::rng;
use cafm::targets::Target;
use cafm::tensor::Tensor;
use cafm::training::{self, TimeSampling, TrainConfig};

use common::*;

#[test]
fn finite_difference_suite_over_100_seeds() {
    for c in gradcheck::finite_difference_suite(100, None).unwrap() {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn mutation_fixture_fails_the_suite() {
    let report = gradcheck::run(Some(GradFault::FlipGaussianLogPdfSign)).unwrap();
    assert!(!report.passed());
    assert!(report.failures().contains(&"fd/gaussian_log_pdf"));
    assert!(report.failures().contains(&"pg/d_mu"));
}

#[test]
fn policy_gradient_matches_gaussian_closed_form() {
    for (k, (mu, sigma, a)) in [(0.0, 1.0, 0.5), (0.4, 0.3, 0.2), (-1.0, 2.0, 1.5)].into_iter().enumerate() {
        // 20 repetitions of 5000 trajectories
        let r = gradcheck::pg_toy(mu, sigma, a, 20, 5000, false, 100 + k as u64, None).unwrap();
        let (tm, ts) = pg_truth(mu, sigma, a);
        assert!((r.d_mu - tm).abs() <= 3.0 * r.d_mu_se, "d_mu {r:?} vs {tm}");
        assert!((r.d_log_sigma - ts).abs() <= 3.0 * r.d_log_sigma_se, "d_log_sigma {r:?} vs {ts}");
    }
}

#[test]
fn baseline_leaves_the_expected_gradient_unchanged() {
    let plain = gradcheck::pg_toy(0.2, 0.7, 0.4, 20, 5000, false, 7, None).unwrap();
    let based = gradcheck::pg_toy(0.2, 0.7, 0.4, 20, 5000, true, 8, None).unwrap();
    let se = (plain.d_mu_se.powi(2) + based.d_mu_se.powi(2)).sqrt();
    assert!((plain.d_mu - based.d_mu).abs() <= 3.0 * se);
    let se = (plain.d_log_sigma_se.powi(2) + based.d_log_sigma_se.powi(2)).sqrt();
    assert!((plain.d_log_sigma - based.d_log_sigma).abs() <= 3.0 * se);
    // the baseline should not make things noisier here
    assert!(based.d_mu_se < plain.d_mu_se);
}

#[test]
fn euler_error_halves_with_the_step() {
    let ratio = euler_error(&[1.0, -0.5, 2.0], 50) / euler_error(&[1.0, -0.5, 2.0], 100);
    assert!((1.7..=2.3).contains(&ratio), "{ratio}");
}

#[test]
fn identity_field_is_exact() {
    let p = identity_field(3);
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
    assert_eq!(p.velocity_at(&x, 0.3).unwrap().data(), x.data());
}

#[test]
fn randomized_loss_gap_is_sigma_squared() {
    let r = jensen_gap(10_000, 3);
    assert!((r.gap - r.sigma_sq).abs() <= 3.0 * r.se, "gap {} sigma^2 {} se {}", r.gap, r.sigma_sq, r.se);
    assert!(r.gap > 0.0);
}

#[test]
fn gaussian_log_pdf_integrates_to_one() {
    for (mu, sigma) in [(0.0, 1.0), (1.3, 0.2), (-2.0, 3.5)] {
        let n = 20_001;
        let (lo, hi) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
        let h = (hi - lo) / (n - 1) as f64;
        let tape = Tape::new();
        let m = Var::constant(Tensor::vector(vec![mu]).unwrap());
        let s = Var::constant(Tensor::vector(vec![sigma]).unwrap());
        let mut total = 0.0;
        for i in 0..n {
            let u = Tensor::vector(vec![lo + i as f64 * h]).unwrap();
            let f = tape.gaussian_log_pdf(&u, &m, &s).unwrap().value().item().exp();
            total += if i == 0 || i == n - 1 { 0.5 * f } else { f };
        }
        assert!((total * h - 1.0).abs() < 1e-4, "{mu} {sigma}: {}", total * h);
    }
}

#[test]
fn distances_match_grid_brute_force() {
    let sets = [
        ConstraintSet::new_box(vec![-1.0, -0.5], vec![2.0, 1.5]).unwrap(),
        ConstraintSet::two_boxes(1.0, 5.0).unwrap(),
        ConstraintSet::ball(2, 1.0).unwrap(),
    ];
    let mut r = rng::stream(1, "grid", 0);
    for c in &sets {
        for _ in 0..25 {
            let x = rng::standard_normal(&mut r, &[2]).map(|v| 3.0 * v);
            let x = [x.data()[0], x.data()[1]];
            let (brute, res) = grid_distance(c, x, -8.0, 8.0, 400);
            let d = c.distance_value(&x).unwrap();
            assert!((d - brute).abs() <= res + 1e-12, "{} at {x:?}: {d} vs {brute}", c.name());
        }
    }
}

#[test]
fn swd_matches_dense_projection_brute_force() {
    let mut r = rng::stream(2, "swd", 0);
    let a = Target::BoxGmm.sample(400, &mut r).unwrap();
    let b = Target::TwoBoxes.sample(400, &mut r).unwrap();
    let dense = dense_swd_2d(&rows(&a), &rows(&b), 2.0, 4000);
    let settings = SwdSettings {
        projections: 20_000,
        p: 2.0,
    };
    let est = metrics::swd(&a, &b, settings, &mut rng::stream(2, "swd.dirs", 0)).unwrap();
    assert!((est - dense).abs() / dense <= 1e-2, "{est} vs {dense}");
}

#[test]
fn unequal_sample_sizes_agree_with_resampled_equal_sizes() {
    // Duplicating every sample leaves the empirical distribution unchanged.
    let mut r = rng::stream(4, "swd", 0);
    let a = Target::BoxGmm.sample(300, &mut r).unwrap();
    let b = Target::TwoBoxes.sample(300, &mut r).unwrap();
    let b2 = Tensor::vstack(&[b.clone(), b.clone()]).unwrap();
    let dirs: Vec<Vec<f64>> = (0..64).map(|_| random_direction(2, &mut r)).collect();
    let x = metrics::swd_with_directions(&a, &b, &dirs, 2.0).unwrap();
    let y = metrics::swd_with_directions(&a, &b2, &dirs, 2.0).unwrap();
    assert!((x - y).abs() / x < 1e-2, "{x} vs {y}");
}

#[test]
fn fmdd_with_zero_lambda_is_grid_time_fm() {
    let cfg = TrainConfig {
        lambda: 0.0,
        iters1: 6,
        iters2: 6,
        batch1: 12,
        batch2: 12,
        lr1: 2e-3,
        lr2: 2e-3,
        steps: 8,
        n2: 2,
        ..TrainConfig::default()
    };
    let mlp = MlpConfig::new(2).with_hidden(vec![8]);
    let data = Target::BoxGmm;
    let c = data.constraint();
    let (dd, _) = training::train_fmdd(&cfg, &mlp, &data, &c, None).unwrap();
    let (fm, _) = training::train_fm_with(&cfg, &mlp, &data, TimeSampling::Grid(8), "dd").unwrap();
    assert_eq!(dd.flatten(), fm.flatten());
}

#[test]
fn untrained_ball20_violation_matches_prior_mass() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    // X ~ N(0, I_20) lies outside the unit ball with probability P(chi2_20 > 1)
    let outside = 1.0 - ChiSquared::new(20.0).unwrap().cdf(1.0);
    assert!(outside > 0.999);
    let x = rng::standard_normal(&mut rng::stream(0, "prior", 0), &[5000, 20]);
    let v = metrics::violation_rate(&x, &ConstraintSet::ball(20, 1.0).unwrap()).unwrap();
    assert!((v - outside).abs() < 4.0 * (outside * (1.0 - outside) / 5000.0).sqrt() + 1e-3);
    let zero = ParamSet::zeros(&MlpConfig::new(20).with_hidden(vec![8])).unwrap();
    let y = cafm::flow::integrate(&zero.constants(), &x, &cafm::flow::TimeGrid::new(10).unwrap()).unwrap();
    assert_eq!(y.data(), x.data());
}
