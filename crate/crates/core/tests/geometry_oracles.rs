mod common;

use common::{brute_fps, brute_knn, cloud, random_points};
use progcloud::geometry::{
    downsample, estimate_normals, farthest_point_sample, knn_points, nearest_assignment, Factor,
    SampleSize,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(n in 1usize..300, q in 1usize..40, k in 1usize..12, seed in 0u64..1000) {
        let pts = random_points(n, seed);
        let queries = random_points(q, seed + 1);
        let k = k.min(n);
        let idx = knn_points(&pts, &queries, k).unwrap();
        for (i, qp) in queries.iter().enumerate() {
            prop_assert_eq!(idx.row(i).to_vec(), brute_knn(&pts, *qp, k));
        }
    }

    #[test]
    fn knn_on_lattice_ties(side in 2usize..7, k in 1usize..9) {
        // Integer lattice: many exactly equal distances.
        let pts: Vec<[f64; 3]> = (0..side * side * side)
            .map(|i| [(i % side) as f64, ((i / side) % side) as f64, (i / (side * side)) as f64])
            .collect();
        let k = k.min(pts.len());
        let idx = knn_points(&pts, &pts, k).unwrap();
        for (i, p) in pts.iter().enumerate() {
            prop_assert_eq!(idx.row(i).to_vec(), brute_knn(&pts, *p, k));
        }
    }

    #[test]
    fn fps_matches_recomputed_max_min(n in 2usize..120, frac in 0.05f64..1.0, seed in 0u64..1000) {
        let pts = random_points(n, seed);
        let m = ((n as f64 * frac).ceil() as usize).max(1);
        prop_assert_eq!(farthest_point_sample(&pts, m), brute_fps(&pts, m));
    }

    #[test]
    fn assignment_is_partition_with_counts_summing_to_n(n in 2usize..400, seed in 0u64..1000) {
        let pc = cloud(random_points(n, seed));
        let (_, down) = downsample(&pc, SampleSize::Factor(Factor::Third)).unwrap();
        let map = nearest_assignment(&pc, &down);
        prop_assert!(map.is_partition());
        prop_assert_eq!(map.buckets.iter().map(Vec::len).sum::<usize>(), n);
        prop_assert_eq!(down.len(), n.div_ceil(3));
    }
}

#[test]
fn normals_of_tilted_plane() {
    let pts: Vec<[f64; 3]> = random_points(200, 9)
        .into_iter()
        .map(|p| [p[0], p[1], 0.3 * p[0] + 0.2 * p[1]])
        .collect();
    let (with, degenerate) = estimate_normals(&cloud(pts), 10).unwrap();
    let expect = {
        let n = [-0.3, -0.2, 1.0];
        let l = (0.09f64 + 0.04 + 1.0).sqrt();
        [n[0] / l, n[1] / l, n[2] / l]
    };
    assert!(degenerate.iter().all(|d| !d));
    for n in with.normals().unwrap() {
        let cos = (n[0] * expect[0] + n[1] * expect[1] + n[2] * expect[2]).abs();
        assert!(cos > 1.0 - 1e-9, "normal {n:?}");
    }
}

#[test]
fn duplicate_points_still_yield_distinct_samples() {
    let pts = vec![[0.2, 0.2, 0.2]; 30];
    let mut s = farthest_point_sample(&pts, 15);
    s.sort();
    s.dedup();
    assert_eq!(s.len(), 15);
}
