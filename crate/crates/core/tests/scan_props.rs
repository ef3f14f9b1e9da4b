use proptest::prelude::*;
use rop::scan::{halton_disc, halton_square, perturb_positions};

#[test]
fn halton_points_never_collide() {
    let scan = halton_disc(100_000, 1.0).unwrap();
    let mut keys: Vec<(u64, u64)> = scan.positions().iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
    keys.sort_unstable();
    keys.dedup();
    assert_eq!(keys.len(), 100_000);
}

#[test]
fn disc_points_fill_equal_area_annuli_evenly() {
    // eight annuli of equal area; chi-square with 7 degrees of freedom
    const CRITICAL_1PC: f64 = 18.475;
    let (p, radius) = (6600, 1.0);
    let scan = halton_disc(p, 2.0 * radius).unwrap();
    let mut counts = [0usize; 8];
    for q in scan.positions() {
        let u = (q[0].hypot(q[1]) / radius).powi(2);
        counts[((u * 8.0) as usize).min(7)] += 1;
    }
    let expected = p as f64 / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CRITICAL_1PC, "chi2 {chi2} counts {counts:?}");
}

proptest! {
    #[test]
    fn halton_scans_are_deterministic_and_contained(p in 1usize..2000, side in 0.1f64..10.0) {
        let a = halton_square(p, side).unwrap();
        let again = halton_square(p, side).unwrap();
        prop_assert_eq!(a.positions(), again.positions());
        prop_assert!(a.positions().iter().flatten().all(|&c| (0.0..side).contains(&c)));
        let d = halton_disc(p, side).unwrap();
        prop_assert!(d.positions().iter().all(|q| q[0].hypot(q[1]) <= side / 2.0));
    }

    #[test]
    fn perturbation_mean_is_exact(p in 2usize..500, mean in 0.01f64..2.0, seed in any::<u64>()) {
        let scan = halton_square(p, 1.0).unwrap();
        let moved = perturb_positions(&scan, mean, seed).unwrap();
        let avg = scan.positions().iter().zip(moved.positions())
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .sum::<f64>() / p as f64;
        prop_assert!((avg - mean * scan.nominal_dx()).abs() <= 1e-12 * mean * scan.nominal_dx());
    }
}
