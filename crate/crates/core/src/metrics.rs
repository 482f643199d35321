//! Chamfer distance, PSNR-D1/D2 and Bjontegaard delta rate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cloud::{dot, sub, PointCloud};
use crate::geometry::{estimate_normals, nearest_indices};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty point cloud")]
    Empty,
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Sum of the two directional means of squared nearest-neighbour distances.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    directional_mse(a, b) + directional_mse(b, a)
}

/// Mean over `from` of the squared distance to the nearest point of `to`.
pub fn directional_mse(from: &PointCloud, to: &PointCloud) -> f64 {
    let nn = nearest_indices(to.coords(), from.coords());
    let t = to.coords();
    from.coords()
        .iter()
        .zip(&nn)
        .map(|(p, &j)| {
            let d = sub(t[j], *p);
            dot(d, d)
        })
        .sum::<f64>()
        / from.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsnrMode {
    /// Point-to-point.
    D1,
    /// Point-to-plane: displacement projected on the original's normals.
    D2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeakMode {
    /// `10 log10(3 Peak^2 / MSE)` with `Peak = |p_max - p_min|^2`.
    #[default]
    Literal,
    /// Conventional form `10 log10(3 Peak / MSE)`, i.e. diagonal squared once.
    Conventional,
}

pub const NORMAL_NEIGHBORS: usize = 16;

/// `(MSE_o->r, MSE_r->o)` under the given error mode. D2 needs normals on
/// `original`; they are estimated when absent.
pub fn directional_errors(
    original: &PointCloud,
    reconstruction: &PointCloud,
    mode: PsnrMode,
) -> Result<(f64, f64), MetricError> {
    let estimated;
    let normals = match (mode, original.normals()) {
        (PsnrMode::D1, _) => None,
        (PsnrMode::D2, Some(n)) => Some(n),
        (PsnrMode::D2, None) => {
            let k = NORMAL_NEIGHBORS.min(original.len());
            estimated = estimate_normals(original, k)
                .map_err(|e| MetricError::Argument(e.to_string()))?
                .0;
            estimated.normals()
        }
    };
    let o = original.coords();
    let r = reconstruction.coords();
    let err = |d: [f64; 3], normal_of: usize| match normals {
        None => dot(d, d),
        Some(ns) => {
            let p = dot(d, ns[normal_of]);
            p * p
        }
    };
    let o2r = nearest_indices(r, o);
    let mse_or = o
        .iter()
        .enumerate()
        .map(|(i, p)| err(sub(r[o2r[i]], *p), i))
        .sum::<f64>()
        / o.len() as f64;
    let r2o = nearest_indices(o, r);
    let mse_ro = r
        .iter()
        .enumerate()
        .map(|(i, p)| err(sub(*p, o[r2o[i]]), r2o[i]))
        .sum::<f64>()
        / r.len() as f64;
    Ok((mse_or, mse_ro))
}

/// PSNR from a precomputed symmetric error; `+inf` when `mse_max == 0`.
pub fn psnr_from_mse(peak: f64, mse_max: f64, peak_mode: PeakMode) -> f64 {
    if mse_max == 0.0 {
        return f64::INFINITY;
    }
    let signal = match peak_mode {
        PeakMode::Literal => 3.0 * peak * peak,
        PeakMode::Conventional => 3.0 * peak,
    };
    10.0 * (signal / mse_max).log10()
}

pub fn psnr_d(
    original: &PointCloud,
    reconstruction: &PointCloud,
    mode: PsnrMode,
    peak_mode: PeakMode,
) -> Result<f64, MetricError> {
    let peak = original.bounding_box().diagonal_sq();
    if !(peak > 0.0) {
        return Err(MetricError::Undefined(
            "original has zero bounding-box extent".into(),
        ));
    }
    let (a, b) = directional_errors(original, reconstruction, mode)?;
    Ok(psnr_from_mse(peak, a.max(b), peak_mode))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
    pub label: String,
}

impl RdPoint {
    pub fn new(bpp: f64, quality: f64, label: impl Into<String>) -> Self {
        Self {
            bpp,
            quality,
            label: label.into(),
        }
    }
}

/// Least-squares cubic `log10(rate) ~ poly(quality)`. Quality is centred and
/// scaled before fitting; the returned closure evaluates the antiderivative
/// in original units.
struct CubicFit {
    coef: [f64; 4],
    mean: f64,
    scale: f64,
}

impl CubicFit {
    fn fit(points: &[RdPoint]) -> Result<Self, MetricError> {
        let n = points.len();
        let mean = points.iter().map(|p| p.quality).sum::<f64>() / n as f64;
        let spread = points
            .iter()
            .map(|p| (p.quality - mean).abs())
            .fold(0.0, f64::max);
        let scale = if spread > 0.0 { spread } else { 1.0 };
        let a = DMatrix::from_fn(n, 4, |i, j| ((points[i].quality - mean) / scale).powi(j as i32));
        let b = DVector::from_iterator(n, points.iter().map(|p| p.bpp.log10()));
        let svd = a.svd(true, true);
        let x = svd
            .solve(&b, 1e-12)
            .map_err(|e| MetricError::Undefined(e.to_string()))?;
        Ok(Self {
            coef: [x[0], x[1], x[2], x[3]],
            mean,
            scale,
        })
    }

    /// Integral of the fit over quality in `[lo, hi]`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let t = (q - self.mean) / self.scale;
            let mut s = 0.0;
            for (j, c) in self.coef.iter().enumerate() {
                s += c * t.powi(j as i32 + 1) / (j as f64 + 1.0);
            }
            s * self.scale
        };
        anti(hi) - anti(lo)
    }
}

/// Average rate difference (percent) of `test` against `anchor` at equal
/// quality.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64, MetricError> {
    for (name, curve) in [("anchor", anchor), ("test", test)] {
        if curve.len() < 4 {
            return Err(MetricError::Argument(format!(
                "{name} curve has {} points, need at least 4",
                curve.len()
            )));
        }
        if curve
            .iter()
            .any(|p| !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.quality.is_finite())
        {
            return Err(MetricError::Argument(format!(
                "{name} curve needs positive finite rates and finite qualities"
            )));
        }
    }
    let range = |c: &[RdPoint]| {
        let lo = c.iter().map(|p| p.quality).fold(f64::INFINITY, f64::min);
        let hi = c.iter().map(|p| p.quality).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (alo, ahi) = range(anchor);
    let (tlo, thi) = range(test);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if !(hi > lo) {
        return Err(MetricError::Undefined(
            "quality ranges do not overlap".into(),
        ));
    }
    let fa = CubicFit::fit(anchor)?;
    let ft = CubicFit::fit(test)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

pub fn rd_to_csv(points: &[RdPoint]) -> String {
    let mut s = String::from("label,bpp,quality\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.label, p.bpp, p.quality));
    }
    s
}

pub fn rd_from_csv(text: &str) -> Result<Vec<RdPoint>, MetricError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("label")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(MetricError::Argument(format!("line {}: expected 3 fields", i + 1)));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| MetricError::Argument(format!("line {}: bad number '{s}'", i + 1)))
        };
        out.push(RdPoint::new(num(f[1])?, num(f[2])?, f[0]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pc(v: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(v, "t").unwrap()
    }

    #[test]
    fn chamfer_basic() {
        let a = pc(vec![[0.0; 3]]);
        let b = pc(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b), 2.0);
        assert_eq!(chamfer_distance(&a, &a), 0.0);
    }

    #[test]
    fn psnr_zero_db_identity() {
        assert!((psnr_from_mse(2.0, 3.0 * 4.0, PeakMode::Literal)).abs() < 1e-12);
        assert!((psnr_from_mse(2.0, 6.0, PeakMode::Conventional)).abs() < 1e-12);
    }

    #[test]
    fn identical_is_infinite() {
        let a = pc(vec![[0.0; 3], [1.0, 0.5, 0.2], [0.3, 0.9, 0.1], [0.5, 0.5, 0.9]]);
        assert_eq!(
            psnr_d(&a, &a, PsnrMode::D1, PeakMode::Literal).unwrap(),
            f64::INFINITY
        );
        let single = pc(vec![[1.0; 3]]);
        assert!(psnr_d(&single, &a, PsnrMode::D1, PeakMode::Literal).is_err());
    }

    fn curve(rates: &[f64], q: &[f64]) -> Vec<RdPoint> {
        rates
            .iter()
            .zip(q)
            .map(|(&r, &q)| RdPoint::new(r, q, "c"))
            .collect()
    }

    #[test]
    fn bd_rate_identity_and_doubling() {
        let q = [30.0, 33.0, 36.5, 40.0, 41.0];
        let r = [0.1, 0.2, 0.45, 0.9, 1.3];
        let a = curve(&r, &q);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let doubled: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        let t = curve(&doubled, &q);
        assert!((bd_rate(&a, &t).unwrap() - 100.0).abs() < 1e-9);
        assert!((bd_rate(&t, &a).unwrap() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn bd_rate_errors() {
        let a = curve(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]);
        assert!(matches!(bd_rate(&a, &a), Err(MetricError::Argument(_))));
        let a = curve(&[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0, 3.0, 4.0]);
        let b = curve(&[0.1, 0.2, 0.3, 0.4], &[5.0, 6.0, 7.0, 8.0]);
        assert!(matches!(bd_rate(&a, &b), Err(MetricError::Undefined(_))));
    }

    #[test]
    fn csv_round_trip() {
        let pts = curve(&[0.1, 0.25], &[30.0, 31.5]);
        assert_eq!(rd_from_csv(&rd_to_csv(&pts)).unwrap(), pts);
    }
}
