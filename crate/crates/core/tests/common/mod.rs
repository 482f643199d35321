//! Brute-force reference implementations shared by the integration tests
//! and the acceptance runner. Deliberately naive: no grids, no early exits.
#![allow(dead_code)]

pub mod grad;

use progcloud::{Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn d2(a: Point3, b: Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

pub fn cloud(points: Vec<Point3>) -> PointCloud {
    PointCloud::new(points, "test").unwrap()
}

/// `k` nearest by (squared distance, index).
pub fn brute_knn(reference: &[Point3], q: Point3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = reference.iter().enumerate().map(|(i, p)| (d2(*p, q), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn brute_nearest(reference: &[Point3], q: Point3) -> usize {
    brute_knn(reference, q, 1)[0]
}

/// Max-min sampling recomputed from scratch at every step.
pub fn brute_fps(points: &[Point3], m: usize) -> Vec<usize> {
    let n = points.len() as f64;
    let c = [0, 1, 2].map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut chosen = vec![brute_nearest(points, c)];
    while chosen.len() < m.min(points.len()) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let gap = chosen.iter().map(|&j| d2(*p, points[j])).fold(f64::INFINITY, f64::min);
            if gap > best.0 {
                best = (gap, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

pub fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let dir = |x: &[Point3], y: &[Point3]| {
        x.iter()
            .map(|p| y.iter().map(|q| d2(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    dir(a, b) + dir(b, a)
}

/// Two-pass PSNR: first find neighbours, then accumulate errors. `normals`
/// belong to `orig`; the r->o pass uses the matched original's normal.
pub fn brute_psnr(orig: &[Point3], rec: &[Point3], normals: Option<&[Point3]>) -> f64 {
    let o2r: Vec<usize> = orig.iter().map(|p| brute_nearest(rec, *p)).collect();
    let r2o: Vec<usize> = rec.iter().map(|p| brute_nearest(orig, *p)).collect();
    let err = |d: Point3, n: Option<Point3>| match n {
        None => d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
        Some(n) => (d[0] * n[0] + d[1] * n[1] + d[2] * n[2]).powi(2),
    };
    let mut a = 0.0;
    for (i, p) in orig.iter().enumerate() {
        let r = rec[o2r[i]];
        a += err([r[0] - p[0], r[1] - p[1], r[2] - p[2]], normals.map(|ns| ns[i]));
    }
    a /= orig.len() as f64;
    let mut b = 0.0;
    for (i, p) in rec.iter().enumerate() {
        let o = orig[r2o[i]];
        b += err([p[0] - o[0], p[1] - o[1], p[2] - o[2]], normals.map(|ns| ns[r2o[i]]));
    }
    b /= rec.len() as f64;
    let lo = [0, 1, 2].map(|k| orig.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min));
    let hi = [0, 1, 2].map(|k| orig.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max));
    let peak = d2(lo, hi);
    10.0 * (3.0 * peak * peak / a.max(b)).log10()
}

/// BD-rate by trapezoid integration of two exact curves `log10 r = f(q)`.
pub fn quadrature_bd(fa: impl Fn(f64) -> f64, ft: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let q = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        s += w * (ft(q) - fa(q));
    }
    (10f64.powf(s * h / (hi - lo)) - 1.0) * 100.0
}

/// Random pmfs and symbol strings through the range coder; returns the number
/// of sequences that failed to round-trip.
pub fn range_coder_fuzz(sequences: usize, seed: u64) -> usize {
    use progcloud::entropy::range_coder::{decode_symbols, encode_symbols, FreqTable};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..sequences {
        let size = rng.random_range(1..64usize);
        // Mix of flat, peaked and near-degenerate distributions.
        let sharp: f64 = rng.random_range(0.0..6.0);
        let pmf: Vec<f64> = (0..size).map(|_| rng.random::<f64>().powf(sharp.exp())).collect();
        let table = FreqTable::from_pmf(&pmf).unwrap();
        let len = rng.random_range(0..300usize);
        let symbols: Vec<usize> = (0..len)
            .map(|_| {
                if rng.random_bool(0.1) {
                    rng.random_range(0..size)
                } else {
                    let u = rng.random::<f64>() * pmf.iter().sum::<f64>();
                    let mut acc = 0.0;
                    pmf.iter().position(|p| {
                        acc += p;
                        acc >= u
                    }).unwrap_or(size - 1)
                }
            })
            .collect();
        let ok = encode_symbols(&symbols, &table)
            .and_then(|b| decode_symbols(&b, symbols.len(), &table))
            .map(|d| d == symbols)
            .unwrap_or(false);
        if !ok {
            failures += 1;
        }
    }
    failures
}

/// Every sequence of length 0..=7 over a 3-symbol alphabet under several
/// tables, including one with a near-certain symbol. Returns
/// `(checked, failures)`.
pub fn exhaustive_three_symbol() -> (usize, usize) {
    use progcloud::entropy::range_coder::{decode_symbols, encode_symbols, FreqTable, TOTAL};
    let tables = [
        FreqTable::from_pmf(&[1.0, 1.0, 1.0]).unwrap(),
        FreqTable::from_pmf(&[0.7, 0.2, 0.1]).unwrap(),
        FreqTable::from_frequencies(&[1, TOTAL - 2, 1]).unwrap(),
        FreqTable::from_frequencies(&[TOTAL - 2, 1, 1]).unwrap(),
    ];
    let (mut checked, mut failures) = (0, 0);
    for t in &tables {
        for len in 0..=7u32 {
            for code in 0..3usize.pow(len) {
                let s: Vec<usize> = (0..len).map(|i| code / 3usize.pow(i) % 3).collect();
                let ok = encode_symbols(&s, t)
                    .and_then(|b| decode_symbols(&b, s.len(), t))
                    .map(|d| d == s)
                    .unwrap_or(false);
                checked += 1;
                failures += usize::from(!ok);
            }
        }
    }
    (checked, failures)
}

/// Checks stream truncation against in-memory masking at every alpha on the
/// `1/C` grid. Returns the alphas whose decodes differ in any bit.
pub fn truncation_mismatches(
    codec: &progcloud::codec::Codec,
    pc: &PointCloud,
    layout: progcloud::entropy::Layout,
) -> Vec<f64> {
    use progcloud::entropy::truncate;
    use progcloud::pipeline::{compress, decompress, masked_decode};
    let comp = compress(codec, pc, layout, 0.6).unwrap();
    let c = codec.cfg.c;
    let mut bad = Vec::new();
    for j in 1..=c {
        let alpha = j as f64 / c as f64;
        let cut = truncate(&comp.bitstream, alpha).unwrap();
        let reparsed = progcloud::entropy::ProgressiveBitstream::from_bytes(&cut.to_bytes()).unwrap();
        let a = decompress(codec, &reparsed).unwrap();
        let b = masked_decode(codec, &comp, alpha, layout).unwrap();
        let same = a.len() == b.len()
            && a.coords().iter().zip(b.coords()).all(|(p, q)| {
                p.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        if !same {
            bad.push(alpha);
        }
    }
    bad
}

/// Largest absolute deviation of CD, PSNR-D1 and PSNR-D2 from the brute-force
/// versions over `pairs` random cloud pairs of at most 512 points.
pub fn metric_oracle_gap(pairs: usize, seed: u64) -> f64 {
    use progcloud::geometry::estimate_normals;
    use progcloud::metrics::{chamfer_distance, psnr_d, PeakMode, PsnrMode};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let n = rng.random_range(16..=512usize);
        let m = rng.random_range(16..=512usize);
        let orig = random_points(n, seed * 1000 + 2 * i as u64);
        let rec: Vec<Point3> = random_points(m, seed * 1000 + 2 * i as u64 + 1)
            .into_iter()
            .map(|p| p.map(|c| 0.1 + 0.8 * c))
            .collect();
        let (o, r) = (cloud(orig.clone()), cloud(rec.clone()));
        worst = worst.max((chamfer_distance(&o, &r) - brute_chamfer(&orig, &rec)).abs());
        let d1 = psnr_d(&o, &r, PsnrMode::D1, PeakMode::Literal).unwrap();
        worst = worst.max((d1 - brute_psnr(&orig, &rec, None)).abs());
        let with_normals = estimate_normals(&o, 16).unwrap().0;
        let normals = with_normals.normals().unwrap().to_vec();
        let d2 = psnr_d(&with_normals, &r, PsnrMode::D2, PeakMode::Literal).unwrap();
        worst = worst.max((d2 - brute_psnr(&orig, &rec, Some(&normals))).abs());
    }
    worst
}
