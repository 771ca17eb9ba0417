use proptest::prelude::*;

use cafm::autodiff::{Tape, Var};
use cafm::constraints::ConstraintSet;
use cafm::flow::{self, TimeGrid};
use cafm::metrics::{self, random_direction};
use cafm::model::{MlpConfig, ParamSet};
use cafm::rng;
use cafm::targets::Target;
use cafm::tensor::Tensor;

fn sets() -> Vec<ConstraintSet> {
    vec![
        Target::BoxGmm.constraint(),
        Target::TwoBoxes.constraint(),
        ConstraintSet::ball(2, 1.0).unwrap(),
        ConstraintSet::new_box(vec![-1.0, 0.5], vec![0.25, 3.0]).unwrap(),
        ConstraintSet::hyperplane(vec![1.0, -2.0], 0.5, 1e-9).unwrap(),
    ]
}

fn normal_batch(seed: u64, rows: usize, cols: usize, scale: f64) -> Tensor {
    rng::standard_normal(&mut rng::stream(seed, "prop", 0), &[rows, cols]).map(|v| scale * v)
}

fn spectral_norm(w: &Tensor) -> f64 {
    // power iteration on W^T W
    let (r, c) = (w.rows(), w.cols());
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut s = 0.0;
    for _ in 0..500 {
        let wv: Vec<f64> = (0..r).map(|i| (0..c).map(|j| w.row(i)[j] * v[j]).sum()).collect();
        let mut u: Vec<f64> = (0..c).map(|j| (0..r).map(|i| w.row(i)[j] * wv[i]).sum()).collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= n);
        v = u;
        s = n.sqrt();
    }
    s
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..10_000, k in -6i32..6, c in -3.0f64..3.0) {
        let x0 = normal_batch(seed, 3, 2, 1.0);
        let grad = |f: &dyn Fn(&Tape, &Var) -> Var| {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let l = f(&tape, &x);
            tape.backward(&l).unwrap().get(&x).unwrap().clone()
        };
        let f = |t: &Tape, x: &Var| t.sum(&t.tanh(&t.mul(x, x).unwrap()).unwrap()).unwrap();
        let g = |t: &Tape, x: &Var| t.mean(&t.sin(x).unwrap()).unwrap();
        let gf = grad(&f);
        let gg = grad(&g);
        // powers of two scale without rounding
        let s = 2f64.powi(k);
        let scaled = grad(&|t: &Tape, x: &Var| t.scale(&f(t, x), s).unwrap());
        for (a, b) in scaled.data().iter().zip(gf.data()) {
            prop_assert_eq!(a.to_bits(), (s * b).to_bits());
        }
        let combo = grad(&|t: &Tape, x: &Var| {
            let gs = t.scale(&g(t, x), c).unwrap();
            t.add(&f(t, x), &gs).unwrap()
        });
        for ((a, b), e) in combo.data().iter().zip(gf.data()).zip(gg.data()) {
            prop_assert!((a - (b + c * e)).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn detach_stops_the_gradient(v in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(v.clone()).unwrap());
        let l = tape.sum(&tape.mul(&x, &x.detach()).unwrap()).unwrap();
        let g = tape.backward(&l).unwrap();
        prop_assert_eq!(g.get(&x).unwrap().data(), &v[..]);
    }

    #[test]
    fn velocity_is_deterministic_and_row_independent(seed in 0u64..10_000, t in 0.0f64..=1.0) {
        let p = ParamSet::init(&MlpConfig::new(3).with_hidden(vec![16, 16]), seed).unwrap();
        let x = normal_batch(seed, 5, 3, 2.0);
        let a = p.velocity_at(&x, t).unwrap();
        let b = p.velocity_at(&x, t).unwrap();
        prop_assert_eq!(a.data(), b.data());
        for r in 0..5 {
            let one = p.velocity_at(&x.select_rows(&[r]), t).unwrap();
            prop_assert_eq!(one.data(), a.row(r));
        }
    }

    #[test]
    fn tanh_network_is_lipschitz_in_x(seed in 0u64..10_000, t in 0.0f64..=1.0) {
        let p = ParamSet::init(&MlpConfig::new(2).with_hidden(vec![12, 12]), seed).unwrap();
        let mut bound = 1.0;
        for name in p.names().iter().filter(|n| n.starts_with('w')) {
            bound *= spectral_norm(p.get(name).unwrap());
        }
        let x = normal_batch(seed, 40, 2, 3.0);
        let u = p.velocity_at(&x, t).unwrap();
        for r in (0..40).step_by(2) {
            let dx = dist(x.row(r), x.row(r + 1));
            let du = dist(u.row(r), u.row(r + 1));
            prop_assert!(du <= bound * dx * (1.0 + 1e-9), "{du} > {bound} * {dx}");
        }
    }

    #[test]
    fn euler_steps_are_bit_exact(seed in 0u64..10_000, n1 in 1usize..12, n2 in 1usize..6) {
        let cfg = MlpConfig::new(2).with_hidden(vec![8]);
        let a = ParamSet::init(&cfg, seed).unwrap();
        let b = ParamSet::init(&cfg, seed + 1).unwrap().with_log_sigma(n2, 0.5).unwrap();
        let x0 = normal_batch(seed, 4, 2, 1.0);
        let grid = TimeGrid::with_split(n1, n2).unwrap();
        let tape = Tape::new();
        let det = flow::sample_deterministic(&tape, &a.bind(&tape), &x0, &TimeGrid::new(n1 + n2).unwrap(), true).unwrap();
        prop_assert!(det.satisfies_euler_identity());
        let tape = Tape::new();
        let mut r = rng::stream(seed, "prop.eps", 0);
        let rnd = flow::sample_randomized(&tape, &a.constants(), &b.bind(&tape), &x0, &grid, &mut r, true, 1e-6).unwrap();
        prop_assert!(rnd.satisfies_euler_identity());
    }

    #[test]
    fn mean_flow_ignores_the_rng(seed in 0u64..10_000, other in 0u64..10_000) {
        let cfg = MlpConfig::new(2).with_hidden(vec![8]);
        let a = ParamSet::init(&cfg, seed).unwrap();
        let b = ParamSet::init(&cfg, seed + 7).unwrap().with_log_sigma(3, 2.0).unwrap();
        let x0 = normal_batch(seed, 6, 2, 1.0);
        let grid = TimeGrid::with_split(5, 3).unwrap();
        let run = |s: u64| {
            let tape = Tape::new();
            let mut r = rng::stream(s, "prop.eps", 0);
            flow::sample_randomized(&tape, &a.constants(), &b.constants(), &x0, &grid, &mut r, false, 1e-6)
                .unwrap()
                .terminal()
                .value()
                .clone()
        };
        let direct = flow::integrate_two(&a.constants(), &b.constants(), &x0, &grid).unwrap();
        let (x, y) = (run(seed), run(other));
        prop_assert_eq!(x.data(), y.data());
        prop_assert_eq!(x.data(), direct.data());
    }

    #[test]
    fn distance_is_one_lipschitz(x in prop::array::uniform2(-8.0f64..8.0), y in prop::array::uniform2(-8.0f64..8.0)) {
        for c in sets() {
            let gap = (c.distance_value(&x).unwrap() - c.distance_value(&y).unwrap()).abs();
            prop_assert!(gap <= dist(&x, &y) + 1e-12, "{}", c.name());
        }
    }

    #[test]
    fn distance_gradient_is_a_unit_vector(x in prop::array::uniform2(-8.0f64..8.0)) {
        for c in sets() {
            let d = c.distance_value(&x).unwrap();
            if d < 1e-3 {
                continue;
            }
            let tape = Tape::new();
            let v = tape.leaf(Tensor::matrix(1, 2, x.to_vec()).unwrap());
            let l = tape.sum(&c.distance(&tape, &v).unwrap()).unwrap();
            prop_assert!((l.value().item() - d).abs() < 1e-12);
            let g = tape.backward(&l).unwrap().get(&v).unwrap().clone();
            prop_assert!((g.norm() - 1.0).abs() < 1e-9, "{} |g| = {}", c.name(), g.norm());
            let h = 1e-6;
            for k in 0..2 {
                let (mut p, mut m) = (x, x);
                p[k] += h;
                m[k] -= h;
                let fd = (c.distance_value(&p).unwrap() - c.distance_value(&m).unwrap()) / (2.0 * h);
                prop_assert!((fd - g.data()[k]).abs() < 1e-5, "{} at {x:?}", c.name());
            }
        }
    }

    #[test]
    fn samplers_are_feasible_deterministic_and_seed_sensitive(seed in 0u64..1_000_000) {
        for t in [Target::BoxGmm, Target::TwoBoxes, Target::BallGmm(8), Target::BallGmm(20), Target::Subspace] {
            let c = t.constraint();
            let a = t.sample(64, &mut rng::stream(seed, "prop.data", 0)).unwrap();
            prop_assert!(c.contains_batch(&a).unwrap().iter().all(|&m| m), "{t:?}");
            let b = t.sample(64, &mut rng::stream(seed, "prop.data", 0)).unwrap();
            prop_assert_eq!(a.data(), b.data());
            let other = t.sample(64, &mut rng::stream(seed + 1, "prop.data", 0)).unwrap();
            prop_assert_ne!(a.data(), other.data());
        }
    }

    #[test]
    fn swd_is_a_pseudometric(seed in 0u64..10_000, n in 20usize..120) {
        let a = normal_batch(seed, n, 2, 1.0);
        let b = normal_batch(seed + 1, n, 2, 2.0);
        let c = normal_batch(seed + 2, n, 2, 0.5).map(|v| v + 1.0);
        let mut r = rng::stream(seed, "prop.dirs", 0);
        let dirs: Vec<Vec<f64>> = (0..64).map(|_| random_direction(2, &mut r)).collect();
        let s = |x: &Tensor, y: &Tensor| metrics::swd_with_directions(x, y, &dirs, 2.0).unwrap();
        prop_assert_eq!(s(&a, &a), 0.0);
        prop_assert!((s(&a, &b) - s(&b, &a)).abs() <= 1e-12 * s(&a, &b));
        prop_assert!(s(&a, &c) <= (s(&a, &b) + s(&b, &c)) * (1.0 + 1e-2));
    }

    #[test]
    fn violation_rate_counts_samples(seed in 0u64..10_000, n in 1usize..300) {
        let x = normal_batch(seed, n, 2, 3.0);
        for c in sets() {
            let v = metrics::violation_rate(&x, &c).unwrap();
            let k = v * n as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn contains_agrees_with_zero_distance_on_ten_thousand_points() {
    let x = normal_batch(5, 10_000, 2, 4.0);
    for c in sets() {
        let tol = match &c {
            ConstraintSet::Hyperplane { tol, .. } => *tol,
            _ => 0.0,
        };
        for r in 0..x.rows() {
            let inside = c.contains(x.row(r)).unwrap();
            let d = c.distance_value(x.row(r)).unwrap();
            assert_eq!(inside, d <= tol, "{} at {:?}: d = {d}", c.name(), x.row(r));
        }
    }
    // points exactly on the hyperplane and on box faces
    let h = ConstraintSet::hyperplane(vec![1.0, 1.0], -1.0, 1e-9).unwrap();
    assert!(h.contains(&[0.25, 0.75]).unwrap());
    assert!(Target::BoxGmm.constraint().contains(&[4.0, -4.0]).unwrap());
    assert_eq!(Target::BoxGmm.constraint().distance_value(&[4.0, -4.0]).unwrap(), 0.0);
}

#[test]
fn swd_is_rotation_invariant_within_two_standard_errors() {
    // Rotating both sets and redrawing directions changes only the Monte
    // Carlo noise of the direction average.
    let k = 512;
    for seed in 0..4u64 {
        let a = Target::BoxGmm.sample(300, &mut rng::stream(seed, "rot.a", 0)).unwrap();
        let b = Target::TwoBoxes.sample(300, &mut rng::stream(seed, "rot.b", 0)).unwrap();
        let th = 0.7 + seed as f64;
        let (co, si) = (th.cos(), th.sin());
        let rot = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|r| {
                    let v = t.row(r);
                    vec![co * v[0] - si * v[1], si * v[0] + co * v[1]]
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let estimate = |x: &Tensor, y: &Tensor, stream: &str| {
            let mut r = rng::stream(seed, stream, 0);
            let per: Vec<f64> = (0..k)
                .map(|_| {
                    let d = random_direction(2, &mut r);
                    metrics::swd_with_directions(x, y, &[d], 2.0).unwrap().powi(2)
                })
                .collect();
            let m = per.iter().sum::<f64>() / k as f64;
            let var = per.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1) as f64;
            let s = m.sqrt();
            (s, (var / k as f64).sqrt() / (2.0 * s))
        };
        let (s1, e1) = estimate(&a, &b, "rot.d1");
        let (s2, e2) = estimate(&rot(&a), &rot(&b), "rot.d2");
        let se = (e1 * e1 + e2 * e2).sqrt();
        assert!((s1 - s2).abs() <= 2.0 * se, "seed {seed}: {s1} vs {s2}, se {se}");
    }
}
