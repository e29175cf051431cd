use must_core::datasets::{generate, load_csv, save_csv, Dataset, Scenario, SyntheticSpec};
use must_core::numerics::{rng_normal, Rng};
use proptest::prelude::*;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn labels_f64(ds: &Dataset) -> Vec<f64> {
    ds.labels.iter().map(|l| *l as f64).collect()
}

#[test]
fn spurious_column_tracks_label_in_sources_only() {
    for seed in 0..5 {
        let d = generate(&SyntheticSpec {
            scenario: Scenario::SpuriousFeature,
            noise_std: 0.05,
            n_per_class: 500,
            seed,
            ..Default::default()
        })
        .unwrap();
        for s in &d.sources {
            let r = pearson(&s.features.column(2), &labels_f64(s));
            assert!(r.abs() > 0.95, "seed {seed} {}: {r}", s.name);
        }
        let eval = &d.target_eval;
        assert!(eval.len() >= 1000);
        let r = pearson(&eval.features.column(2), &labels_f64(eval));
        assert!(r.abs() < 0.1, "seed {seed} target: {r}");
    }
}

/// With tight clusters every target point is closest to its own class
/// center after the target transform.
#[test]
fn target_labels_are_nearest_center() {
    for (seed, classes) in [(0, 2), (1, 2), (2, 3), (3, 5)] {
        let spec = SyntheticSpec {
            noise_std: 0.1 * 4.0,
            separation: 4.0,
            num_classes: classes,
            seed,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let centers: Vec<[f64; 2]> = spec.class_centers().into_iter().map(|c| d.target_transform.apply(c)).collect();
        let eval = &d.target_eval;
        let mut agree = 0;
        for r in 0..eval.len() {
            let x = eval.features.row(r);
            let nearest = (0..classes)
                .min_by(|&a, &b| {
                    let da = (x[0] - centers[a][0]).powi(2) + (x[1] - centers[a][1]).powi(2);
                    let db = (x[0] - centers[b][0]).powi(2) + (x[1] - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            agree += (nearest as i64 == eval.labels[r]) as usize;
        }
        // Centers of C classes on a circle of diameter 4 are at least
        // 4 sin(pi / C) apart; with noise 0.4 a misassignment needs a >2.9 sigma
        // excursion for C = 5, so a handful may occur among 1000 points.
        let allowed = if classes <= 3 { 0 } else { eval.len() / 100 };
        assert!(eval.len() - agree <= allowed, "seed {seed}: {agree}/{}", eval.len());
    }
}

#[test]
fn target_is_unlabeled_copy_of_eval() {
    let d = generate(&SyntheticSpec::default()).unwrap();
    assert!(d.target.is_unlabeled());
    assert_eq!(d.target.features, d.target_eval.features);
    assert!(d.target_eval.labels.iter().all(|l| *l >= 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..5, unlabeled in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let mut features = rng_normal(&mut rng, rows, cols, 0.0, 1e3).unwrap();
        features = features.map(|v| v * 10f64.powi((v.abs() as i32 % 7) - 3));
        let labels = (0..rows).map(|_| if unlabeled { -1 } else { rng.below(4) as i64 }).collect();
        let ds = Dataset::new("d", features, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        prop_assert_eq!(load_csv(&path, "d").unwrap(), ds);
    }

    #[test]
    fn generation_is_a_function_of_the_spec(seed in any::<u64>(), spurious in any::<bool>(), shift in 0.0f64..3.0) {
        let spec = SyntheticSpec {
            scenario: if spurious { Scenario::SpuriousFeature } else { Scenario::Clusters2d },
            n_per_class: 20,
            shift,
            seed,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        prop_assert_eq!(&a, &generate(&spec).unwrap());
        for t in &a.source_transforms {
            prop_assert!((t.translation[0].powi(2) + t.translation[1].powi(2)).sqrt() <= shift + 1e-12);
        }
    }
}
