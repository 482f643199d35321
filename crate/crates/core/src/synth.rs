//! Seeded synthetic clouds with a tunable over-dense region.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::cloud::{CloudError, Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    SphereSurface,
    Plane,
    GaussianClusters,
}

impl Shape {
    pub fn as_str(self) -> &'static str {
        match self {
            Shape::SphereSurface => "sphere_surface",
            Shape::Plane => "plane",
            Shape::GaussianClusters => "gaussian_clusters",
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = CloudError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere_surface" | "sphere" => Ok(Shape::SphereSurface),
            "plane" => Ok(Shape::Plane),
            "gaussian_clusters" | "clusters" => Ok(Shape::GaussianClusters),
            other => Err(CloudError::Argument(format!("unknown shape '{other}'"))),
        }
    }
}

pub const SPHERE_CENTER: Point3 = [0.5, 0.5, 0.5];
pub const SPHERE_RADIUS: f64 = 0.5;

/// Cluster 0 is the dense one.
pub const CLUSTER_CENTERS: [Point3; 4] = [
    [0.25, 0.25, 0.25],
    [0.75, 0.75, 0.25],
    [0.75, 0.25, 0.75],
    [0.25, 0.75, 0.75],
];
pub const CLUSTER_SIGMA: f64 = 0.06;

/// Generates `n` points inside the unit cube. With `density_contrast > 1`
/// the designated region (sphere cap `z > 0.75`, plane strip `x < 0.3`,
/// cluster 0) is that many times denser than the rest.
pub fn generate_synthetic(
    shape: Shape,
    n: usize,
    density_contrast: f64,
    seed: u64,
) -> Result<PointCloud, CloudError> {
    if n < 8 {
        return Err(CloudError::Argument(format!("n = {n}, need at least 8")));
    }
    if !(density_contrast >= 1.0) || !density_contrast.is_finite() {
        return Err(CloudError::Argument(format!(
            "density_contrast {density_contrast} must be finite and >= 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accept_sparse = 1.0 / density_contrast;
    let mut coords = Vec::with_capacity(n);
    match shape {
        Shape::SphereSurface => {
            while coords.len() < n {
                let v: [f64; 3] = [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len < 1e-12 {
                    continue;
                }
                let u = [v[0] / len, v[1] / len, v[2] / len];
                let dense = u[2] > 0.5;
                if !dense && rng.random::<f64>() >= accept_sparse {
                    continue;
                }
                coords.push([
                    SPHERE_CENTER[0] + SPHERE_RADIUS * u[0],
                    SPHERE_CENTER[1] + SPHERE_RADIUS * u[1],
                    SPHERE_CENTER[2] + SPHERE_RADIUS * u[2],
                ]);
            }
        }
        Shape::Plane => {
            while coords.len() < n {
                let x: f64 = rng.random();
                let y: f64 = rng.random();
                if x >= 0.3 && rng.random::<f64>() >= accept_sparse {
                    continue;
                }
                coords.push([x, y, 0.5]);
            }
        }
        Shape::GaussianClusters => {
            let noise = Normal::new(0.0, CLUSTER_SIGMA).expect("valid sigma");
            let total_weight = density_contrast + 3.0;
            for _ in 0..n {
                let pick = rng.random::<f64>() * total_weight;
                let cluster = if pick < density_contrast {
                    0
                } else {
                    1 + (((pick - density_contrast) as usize).min(2))
                };
                let c = CLUSTER_CENTERS[cluster];
                coords.push([
                    (c[0] + noise.sample(&mut rng)).clamp(0.0, 1.0),
                    (c[1] + noise.sample(&mut rng)).clamp(0.0, 1.0),
                    (c[2] + noise.sample(&mut rng)).clamp(0.0, 1.0),
                ]);
            }
        }
    }
    PointCloud::new(coords, format!("synthetic:{shape:?}:{seed}"))
}

/// Index of the cluster center nearest to `p`.
pub fn nearest_cluster(p: Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in CLUSTER_CENTERS.iter().enumerate() {
        let d = crate::cloud::dist_sq(p, *c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
