mod common;

use common::*;
use must_core::analysis::{
    check_sigmoid_derivative_identity, consistency_track, lemma_bound_report, margin_probe, parse_eps_grid,
    sigmoid_derivative,
};
use must_core::must::Snapshot;
use must_core::nn::{LayerSpec, Network};
use must_core::numerics::{rng_normal, Matrix, Rng};
use proptest::prelude::*;

#[test]
fn sigmoid_identity_on_random_grid() {
    let mut rng = Rng::new(11);
    let grid: Vec<f64> = (0..10_000).map(|_| -10.0 + 20.0 * rng.uniform()).collect();
    let report = check_sigmoid_derivative_identity(&grid);
    assert!(report.passed);
    assert!(report.max_identity_error < 1e-12);
    for g in grid {
        let direct = 1.0 / (2.0 + (-g).exp() + g.exp());
        assert!((sigmoid_derivative(g) - direct).abs() < 1e-12);
        assert!(sigmoid_derivative(g) <= (-g.abs()).exp());
    }
    assert_eq!(sigmoid_derivative(0.0), 0.25);
    assert!((sigmoid_derivative(5.0) - sigmoid_derivative(-5.0)).abs() <= 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bound_holds_on_random_instances(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let (teacher, student, target, k) = binary_pair(seed);
        let report = lemma_bound_report(&teacher, &student, &target, k, lambda).unwrap();
        prop_assert!(report.rho >= 0.0);
        prop_assert!(report.a.iter().all(|a| *a >= 0.0));
        prop_assert!(report.min_slack() >= -1e-9, "slack {}", report.min_slack());
        prop_assert!(report.per_sample_max_excess <= 1e-9);
    }

    #[test]
    fn consistency_ignores_sample_order(seed in any::<u64>(), n in 1usize..12, t in 2usize..10, window in 1usize..10, classes in 2usize..4) {
        prop_assume!(window <= t);
        let mut rng = Rng::new(seed);
        let snaps: Vec<Snapshot> = (0..t).map(|s| {
            let raw = rng_normal(&mut rng, n, classes, 0.0, 1.0).unwrap().map(f64::exp);
            let rows: Vec<Vec<f64>> = raw.to_rows().into_iter().map(|r| {
                let z: f64 = r.iter().sum();
                r.into_iter().map(|v| v / z).collect()
            }).collect();
            Snapshot { step: s, teacher_probs: Matrix::from_rows(&rows).unwrap() }
        }).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let shuffled: Vec<Snapshot> = snaps.iter().map(|s| Snapshot {
            step: s.step,
            teacher_probs: s.teacher_probs.select_rows(&perm).unwrap(),
        }).collect();
        let a = consistency_track(&snaps, window).unwrap();
        let b = consistency_track(&shuffled, window).unwrap();
        prop_assert_eq!(a.mean_std.len(), t - window + 1);
        for (x, y) in a.mean_std.iter().zip(&b.mean_std) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn flip_counts_never_decrease(seed in any::<u64>(), softmax in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let arch = random_arch(&mut rng, softmax);
        let classes = if softmax { 3 } else { 2 };
        let net = random_net(&arch, 2, classes, 2, &mut rng);
        let x = rng_normal(&mut rng, 30, 2, 0.0, 2.0).unwrap();
        let curve = margin_probe(&net, &x, 1, &parse_eps_grid("0:0.1:3").unwrap()).unwrap();
        prop_assert_eq!(curve.flip_counts[0], 0);
        prop_assert!(curve.flip_counts.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.flip_counts.last().unwrap(), curve.flip_eps.iter().filter(|e| e.is_some()).count());
    }
}

#[test]
fn bound_is_zero_for_matching_outputs_or_zero_lambda() {
    let mut rng = Rng::new(5);
    let arch = random_arch(&mut rng, false);
    let net = random_net(&arch, 3, 2, 1, &mut rng);
    let target = rng_normal(&mut rng, 50, 3, 0.0, 1.5).unwrap();
    let report = lemma_bound_report(&net, &net, &target, 0, 0.8).unwrap();
    assert!(report.lhs.iter().all(|v| *v == 0.0));
    assert!(report.passed());

    let (teacher, student, target, k) = binary_pair(6);
    let report = lemma_bound_report(&teacher, &student, &target, k, 0.0).unwrap();
    assert!(report.lhs.iter().all(|v| *v == 0.0));
}

/// Logistic regression sigma(w.x + b): the first flipping radius is the
/// distance to the hyperplane, up to one grid step.
#[test]
fn linear_margin_matches_hyperplane_distance() {
    let grid = parse_eps_grid("0:0.05:2").unwrap();
    let step = 0.05;
    let mut rng = Rng::new(3);
    for trial in 0..20 {
        let mut net = Network::new(vec![LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()], 1, &mut rng).unwrap();
        let w = [rng.standard_normal() * 2.0, rng.standard_normal() * 2.0];
        let b = rng.standard_normal();
        net.set_param_vector(&[w[0], w[1], b]).unwrap();
        let x = rng_normal(&mut rng, 40, 2, 0.0, 1.0).unwrap();
        let curve = margin_probe(&net, &x, 0, &grid).unwrap();
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        for r in 0..x.rows() {
            let p = x.row(r);
            let dist = (w[0] * p[0] + w[1] * p[1] + b).abs() / norm;
            match curve.flip_eps[r] {
                Some(e) => assert!(e >= dist - 1e-9 && e <= dist + step + 1e-9, "trial {trial} row {r}: {e} vs {dist}"),
                None => assert!(dist > 2.0 - 1e-9, "trial {trial} row {r}: never flipped at {dist}"),
            }
        }
    }
}

#[test]
fn alternating_probabilities_have_half_std() {
    let snaps: Vec<Snapshot> = (0..6)
        .map(|s| {
            let p = (s % 2) as f64;
            Snapshot {
                step: s,
                teacher_probs: Matrix::from_rows(&[vec![p, 1.0 - p], vec![1.0 - p, p]]).unwrap(),
            }
        })
        .collect();
    let report = consistency_track(&snaps, 2).unwrap();
    assert!(report.per_sample_std.iter().flatten().all(|s| (*s - 0.5).abs() < 1e-15));
    assert!(consistency_track(&snaps, 7).is_err());
}
