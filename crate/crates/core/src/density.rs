//! Per-sample density statistics, the composite density score, the
//! density-driven drop ratio and its EMA-tracked normalization bounds.

use thiserror::Error;

use crate::cloud::{dist_sq, PointCloud};
use crate::geometry::AssignmentMap;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("normalization state used before its first update")]
    Uninitialized,
}

pub const RHO_MIN: f64 = 0.15;
pub const RHO_MAX: f64 = 0.40;
pub const EMA_GAMMA: f64 = 0.1;
const EMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityStats {
    /// Bucket sizes; stored as reals because they feed losses directly.
    pub d_num: Vec<f64>,
    pub d_dist: Vec<f64>,
}

pub fn compute_density_stats(
    assignment: &AssignmentMap,
    original: &PointCloud,
    downsampled: &PointCloud,
) -> DensityStats {
    let o = original.coords();
    let s = downsampled.coords();
    let mut d_num = Vec::with_capacity(s.len());
    let mut d_dist = Vec::with_capacity(s.len());
    for (i, bucket) in assignment.buckets.iter().enumerate() {
        d_num.push(bucket.len() as f64);
        if bucket.is_empty() {
            d_dist.push(0.0);
        } else {
            let total: f64 = bucket.iter().map(|&j| dist_sq(o[j], s[i]).sqrt()).sum();
            d_dist.push(total / bucket.len() as f64);
        }
    }
    DensityStats { d_num, d_dist }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationState {
    pub d_max: f64,
    pub m_max: f64,
    pub gamma: f64,
    pub t: u64,
}

impl Default for NormalizationState {
    fn default() -> Self {
        Self::new(EMA_GAMMA).expect("default gamma is valid")
    }
}

impl NormalizationState {
    pub fn new(gamma: f64) -> Result<Self, DensityError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(DensityError::Argument(format!("gamma {gamma} not in (0, 1]")));
        }
        Ok(Self {
            d_max: 0.0,
            m_max: 0.0,
            gamma,
            t: 0,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.t > 0
    }

    /// One EMA step towards the batch 95th percentiles. The first call
    /// adopts the percentiles outright.
    pub fn ema_update(&self, batch_d_num: &[f64], batch_d_dist: &[f64]) -> Result<Self, DensityError> {
        let p_num = percentile_95(batch_d_num)?;
        let p_dist = percentile_95(batch_d_dist)?;
        let mut next = *self;
        if self.t == 0 {
            next.d_max = p_num.max(EMA_FLOOR);
            next.m_max = p_dist.max(EMA_FLOOR);
        } else {
            let g = self.gamma;
            next.d_max = (1.0 - g) * self.d_max + g * p_num;
            next.m_max = (1.0 - g) * self.m_max + g * p_dist;
        }
        next.t += 1;
        Ok(next)
    }
}

/// Nearest-rank percentile: element `ceil(0.95 n)` (1-based) of the sorted
/// values.
pub fn percentile_95(values: &[f64]) -> Result<f64, DensityError> {
    if values.is_empty() {
        return Err(DensityError::Argument("percentile of empty batch".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (95 * n).div_ceil(100);
    Ok(sorted[rank.max(1) - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityScore {
    pub delta: Vec<f64>,
}

impl DensityScore {
    pub fn mean(&self) -> f64 {
        if self.delta.is_empty() {
            return 0.0;
        }
        self.delta.iter().sum::<f64>() / self.delta.len() as f64
    }
}

pub fn composite_score(
    stats: &DensityStats,
    norm: &NormalizationState,
) -> Result<DensityScore, DensityError> {
    if !norm.is_initialized() {
        return Err(DensityError::Uninitialized);
    }
    let delta = stats
        .d_num
        .iter()
        .zip(&stats.d_dist)
        .map(|(&n, &d)| {
            let conc = (n / norm.d_max).clamp(0.0, 1.0);
            let spread = (d / norm.m_max).clamp(0.0, 1.0);
            0.5 * (conc + (1.0 - spread))
        })
        .collect();
    Ok(DensityScore { delta })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropBounds {
    pub rho_min: f64,
    pub rho_max: f64,
}

impl Default for DropBounds {
    fn default() -> Self {
        Self {
            rho_min: RHO_MIN,
            rho_max: RHO_MAX,
        }
    }
}

impl DropBounds {
    pub fn new(rho_min: f64, rho_max: f64) -> Result<Self, DensityError> {
        if !(0.0 <= rho_min && rho_min <= rho_max && rho_max <= 1.0) {
            return Err(DensityError::Argument(format!(
                "need 0 <= rho_min ({rho_min}) <= rho_max ({rho_max}) <= 1"
            )));
        }
        Ok(Self { rho_min, rho_max })
    }

    pub fn rho(&self, delta: f64) -> f64 {
        let r = self.rho_max - (self.rho_max - self.rho_min) * delta;
        r.clamp(self.rho_min, self.rho_max)
    }
}

pub fn drop_ratio(delta: &DensityScore, bounds: DropBounds) -> Vec<f64> {
    delta.delta.iter().map(|&d| bounds.rho(d)).collect()
}

/// Scene-level drop ratio: mean of the per-sample ratios.
pub fn scene_drop_ratio(delta: &DensityScore, bounds: DropBounds) -> f64 {
    let rhos = drop_ratio(delta, bounds);
    if rhos.is_empty() {
        return bounds.rho_max;
    }
    rhos.iter().sum::<f64>() / rhos.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::nearest_assignment;

    fn state(d_max: f64, m_max: f64) -> NormalizationState {
        NormalizationState {
            d_max,
            m_max,
            gamma: 0.1,
            t: 1,
        }
    }

    #[test]
    fn stats_single_bucket() {
        let original = PointCloud::new(
            vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
            "o",
        )
        .unwrap();
        let sample = PointCloud::new(vec![[0.0; 3]], "s").unwrap();
        let map = nearest_assignment(&original, &sample);
        let s = compute_density_stats(&map, &original, &sample);
        assert_eq!(s.d_num, vec![4.0]);
        assert!((s.d_dist[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stats_identity() {
        let pc = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]], "o").unwrap();
        let s = compute_density_stats(&nearest_assignment(&pc, &pc), &pc, &pc);
        assert_eq!(s.d_num, vec![1.0; 3]);
        assert_eq!(s.d_dist, vec![0.0; 3]);
    }

    #[test]
    fn composite_extremes() {
        let st = state(10.0, 2.0);
        let s = DensityStats {
            d_num: vec![10.0, 0.0, 5.0, 40.0],
            d_dist: vec![0.0, 2.0, 1.0, 9.0],
        };
        let d = composite_score(&s, &st).unwrap().delta;
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 0.5).abs() < 1e-12);
        assert_eq!(d[3], 0.5);
        assert_eq!(
            composite_score(&s, &NormalizationState::default()),
            Err(DensityError::Uninitialized)
        );
    }

    #[test]
    fn drop_ratio_endpoints() {
        let b = DropBounds::default();
        assert!((b.rho(1.0) - 0.15).abs() < 1e-12);
        assert!((b.rho(0.0) - 0.40).abs() < 1e-12);
        assert!((b.rho(0.5) - 0.275).abs() < 1e-12);
        assert!(DropBounds::new(0.5, 0.2).is_err());
        assert!(DropBounds::new(-0.1, 0.2).is_err());
    }

    #[test]
    fn ema_arithmetic() {
        let st = state(10.0, 10.0);
        let next = st.ema_update(&[20.0], &[20.0]).unwrap();
        assert!((next.d_max - 11.0).abs() < 1e-12);
        assert_eq!(next.t, 2);
    }

    #[test]
    fn ema_first_call_initializes() {
        let st = NormalizationState::default();
        let next = st.ema_update(&[3.0, 7.0], &[0.0]).unwrap();
        assert_eq!(next.d_max, 7.0);
        assert_eq!(next.m_max, 1e-6);
    }

    #[test]
    fn ema_fixed_point() {
        let mut st = NormalizationState::default().ema_update(&[1.0], &[1.0]).unwrap();
        for _ in 0..200 {
            st = st.ema_update(&[4.0], &[0.25]).unwrap();
        }
        assert!((st.d_max - 4.0).abs() <= 1e-6);
        assert!((st.m_max - 0.25).abs() <= 1e-6);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_95(&v).unwrap(), 95.0);
        assert_eq!(percentile_95(&[7.0]).unwrap(), 7.0);
        assert_eq!(percentile_95(&[1.0, 2.0]).unwrap(), 2.0);
        assert!(percentile_95(&[]).is_err());
    }
}
