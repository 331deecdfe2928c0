mod common;

use atroseg::metrics::*;
use atroseg::rng::SplitMix64;
use common::{brute_force_acd, brute_force_asd, random_blob, random_mask};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_is_a_function_of_jaccard(seed in any::<u64>(), w in 1usize..24, h in 1usize..24, p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let a = random_mask(&mut rng, w, h, p);
        let b = random_mask(&mut rng, w, h, q);
        let j = jaccard(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert!(0.0 <= j && j <= d + 1e-15 && d <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn distances_match_brute_force(seed in any::<u64>(), w in 1usize..=32, h in 1usize..=32, spacing in 0.1f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let a = extract_boundary(&random_blob(&mut rng, w, h));
        let b = extract_boundary(&random_blob(&mut rng, w, h));
        prop_assume!(!a.is_empty() && !b.is_empty());
        prop_assert!((acd(&a, &b, spacing).unwrap() - brute_force_acd(&a, &b, spacing)).abs() <= 1e-9);
        prop_assert!((asd(&a, &b, spacing).unwrap() - brute_force_asd(&a, &b, spacing)).abs() <= 1e-9);
    }

    #[test]
    fn distances_are_symmetric_and_scale(seed in any::<u64>(), w in 2usize..=32, h in 2usize..=32, c in 0.25f64..4.0) {
        let mut rng = SplitMix64::new(seed);
        let ma = random_blob(&mut rng, w, h);
        let mb = random_blob(&mut rng, w, h);
        let (a, b) = (extract_boundary(&ma), extract_boundary(&mb));
        prop_assume!(!a.is_empty() && !b.is_empty());
        let (x, y) = (acd(&a, &b, 1.0).unwrap(), asd(&a, &b, 1.0).unwrap());
        prop_assert_eq!(x, acd(&b, &a, 1.0).unwrap());
        prop_assert_eq!(y, asd(&b, &a, 1.0).unwrap());
        prop_assert!(x >= 0.0 && y >= 0.0);
        prop_assert_eq!(x == 0.0, a == b);
        prop_assert!((acd(&a, &b, c).unwrap() - c * x).abs() <= 1e-12 * (1.0 + c * x));
        prop_assert!((asd(&a, &b, c).unwrap() - c * y).abs() <= 1e-12 * (1.0 + c * y));
        let m1 = evaluate("s", &ma, &mb, DistanceUnit::Pixels).unwrap();
        let m2 = evaluate("s", &ma, &mb, DistanceUnit::Millimetres(c)).unwrap();
        prop_assert_eq!((m1.jsc, m1.dc), (m2.jsc, m2.dc));
    }

    #[test]
    fn boundary_pixels_are_foreground_and_unique(seed in any::<u64>(), w in 1usize..=20, h in 1usize..=20) {
        let mut rng = SplitMix64::new(seed);
        let m = random_blob(&mut rng, w, h);
        let b = extract_boundary(&m);
        let mut seen = std::collections::HashSet::new();
        for &(r, c) in &b.points {
            prop_assert!(m.get(r, c));
            prop_assert!(seen.insert((r, c)));
        }
    }
}

#[test]
fn equal_length_lines_three_apart() {
    for spacing in [1.0, 0.7] {
        let s = BoundarySet { points: (0..12).map(|r| (r, 2)).collect() };
        let g = BoundarySet { points: (0..12).map(|r| (r, 5)).collect() };
        assert!((acd(&s, &g, spacing).unwrap() - 3.0 * spacing).abs() < 1e-12);
        assert!((brute_force_acd(&s, &g, spacing) - 3.0 * spacing).abs() < 1e-12);
        assert!((asd(&s, &g, spacing).unwrap() - acd(&s, &g, spacing).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn table_row_relation() {
    let j: f64 = 0.950;
    let d = 2.0 * j / (1.0 + j);
    assert_eq!(format!("{d:.3}"), "0.974");
    assert!((d - 0.9744).abs() < 5e-5);
}

#[test]
fn report_aggregates_recompute() {
    let mut rng = SplitMix64::new(11);
    let rows: Vec<SampleMetrics> = (0..20)
        .map(|i| {
            let a = random_blob(&mut rng, 16, 16);
            let b = random_blob(&mut rng, 16, 16);
            evaluate(&format!("s{i}"), &a, &b, DistanceUnit::Millimetres(0.5)).unwrap()
        })
        .collect();
    let report = MetricsReport::new(rows.clone(), DistanceUnit::Millimetres(0.5));
    let mean = rows.iter().map(|r| r.jsc).sum::<f64>() / rows.len() as f64;
    let var = rows.iter().map(|r| (r.jsc - mean).powi(2)).sum::<f64>() / rows.len() as f64;
    assert!((report.jsc.mean - mean).abs() < 1e-12);
    assert!((report.jsc.std - var.sqrt()).abs() < 1e-12);
    let csv = report.to_csv();
    assert!(csv.starts_with("sample_id,jsc,dc,acd,asd,unit,flags\n"));
    assert_eq!(csv.lines().count(), 1 + rows.len() + 2);
    assert!(csv.lines().nth(1).unwrap().contains(",mm,"));
}
