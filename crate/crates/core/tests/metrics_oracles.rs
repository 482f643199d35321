mod common;

use common::{brute_chamfer, cloud, metric_oracle_gap, quadrature_bd, random_points};
use progcloud::metrics::{bd_rate, chamfer_distance, psnr_d, PeakMode, PsnrMode, RdPoint};
use proptest::prelude::*;

#[test]
fn metrics_match_brute_force() {
    assert!(metric_oracle_gap(50, 3) <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(n in 1usize..120, m in 1usize..120, seed in 0u64..1000) {
        let a = random_points(n, seed);
        let b = random_points(m, seed + 7);
        let (ca, cb) = (cloud(a.clone()), cloud(b.clone()));
        let ab = chamfer_distance(&ca, &cb);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - chamfer_distance(&cb, &ca)).abs() < 1e-15);
        prop_assert!((ab - brute_chamfer(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(chamfer_distance(&ca, &ca), 0.0);
    }

    #[test]
    fn point_to_plane_never_below_point_to_point(n in 20usize..200, seed in 0u64..1000) {
        let o = cloud(random_points(n, seed));
        let r = cloud(random_points(n, seed + 1));
        let d1 = psnr_d(&o, &r, PsnrMode::D1, PeakMode::Literal).unwrap();
        let d2 = psnr_d(&o, &r, PsnrMode::D2, PeakMode::Literal).unwrap();
        prop_assert!(d2 >= d1 - 1e-12);
    }
}

fn curve(rate: impl Fn(f64) -> f64, qs: &[f64]) -> Vec<RdPoint> {
    qs.iter().map(|&q| RdPoint::new(rate(q), q, "")).collect()
}

#[test]
fn bd_rate_identity_and_doubling() {
    let qs = [30.0, 33.0, 36.0, 39.0, 42.0];
    let anchor = curve(|q| 0.05 * 1.2f64.powf(q - 30.0), &qs);
    assert_eq!(bd_rate(&anchor, &anchor).unwrap(), 0.0);
    let doubled: Vec<RdPoint> = anchor.iter().map(|p| RdPoint::new(2.0 * p.bpp, p.quality, "")).collect();
    assert!((bd_rate(&anchor, &doubled).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn bd_rate_matches_quadrature_on_exact_cubics() {
    let fa = |q: f64| -2.0 + 0.08 * q - 1e-3 * q * q + 2e-5 * q * q * q;
    let ft = |q: f64| -2.1 + 0.075 * q - 8e-4 * q * q + 1.5e-5 * q * q * q;
    let anchor = curve(|q| 10f64.powf(fa(q)), &[28.0, 31.0, 35.0, 38.0, 41.0]);
    let test = curve(|q| 10f64.powf(ft(q)), &[29.0, 32.0, 34.0, 37.0, 40.0, 43.0]);
    let want = quadrature_bd(fa, ft, 29.0, 41.0, 20_000);
    let got = bd_rate(&anchor, &test).unwrap();
    assert!((got - want).abs() < 0.01, "{got} vs {want}");
}
