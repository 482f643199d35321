//! Point cloud container plus the unit-cube normalization and voxel
//! quantization applied before coding.

use thiserror::Error;

pub type Point3 = [f64; 3];

const NORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("point cloud must contain at least one point")]
    Empty,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("normals length {normals} does not match point count {points}")]
    NormalCount { normals: usize, points: usize },
    #[error("normal {index} is not unit length (|n| = {length})")]
    NormalNotUnit { index: usize, length: f64 },
    #[error("point {index} coordinate {value} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// N points in 3-space with optional unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    normals: Option<Vec<Point3>>,
    pub source_id: String,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>, source_id: impl Into<String>) -> Result<Self, CloudError> {
        if coords.is_empty() {
            return Err(CloudError::Empty);
        }
        if let Some(index) = coords.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(CloudError::NonFinite { index });
        }
        Ok(Self {
            coords,
            normals: None,
            source_id: source_id.into(),
        })
    }

    pub fn with_normals(mut self, normals: Vec<Point3>) -> Result<Self, CloudError> {
        if normals.len() != self.coords.len() {
            return Err(CloudError::NormalCount {
                normals: normals.len(),
                points: self.coords.len(),
            });
        }
        for (index, n) in normals.iter().enumerate() {
            let length = norm(*n);
            if (length - 1.0).abs() > NORMAL_TOLERANCE {
                return Err(CloudError::NormalNotUnit { index, length });
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    /// Always false for a constructed cloud; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn into_coords(self) -> Vec<Point3> {
        self.coords
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::of(&self.coords)
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.coords.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Subset by index, keeping normals when present.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            source_id: self.source_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub p_min: Point3,
    pub p_max: Point3,
}

impl BoundingBox {
    pub fn of(points: &[Point3]) -> Self {
        let mut p_min = [f64::INFINITY; 3];
        let mut p_max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                p_min[a] = p_min[a].min(p[a]);
                p_max[a] = p_max[a].max(p[a]);
            }
        }
        Self { p_min, p_max }
    }

    pub fn extent(&self) -> Point3 {
        [
            self.p_max[0] - self.p_min[0],
            self.p_max[1] - self.p_min[1],
            self.p_max[2] - self.p_min[2],
        ]
    }

    pub fn center(&self) -> Point3 {
        [
            0.5 * (self.p_min[0] + self.p_max[0]),
            0.5 * (self.p_min[1] + self.p_max[1]),
            0.5 * (self.p_min[2] + self.p_max[2]),
        ]
    }

    /// Squared length of the diagonal.
    pub fn diagonal_sq(&self) -> f64 {
        let e = self.extent();
        e[0] * e[0] + e[1] * e[1] + e[2] * e[2]
    }
}

/// Isotropic map `p -> p * scale + offset` into the padded unit cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTransform {
    pub scale: f64,
    pub offset: Point3,
    pub padding: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: Point3) -> Point3 {
        [
            p[0] * self.scale + self.offset[0],
            p[1] * self.scale + self.offset[1],
            p[2] * self.scale + self.offset[2],
        ]
    }

    pub fn invert(&self, q: Point3) -> Point3 {
        [
            (q[0] - self.offset[0]) / self.scale,
            (q[1] - self.offset[1]) / self.scale,
            (q[2] - self.offset[2]) / self.scale,
        ]
    }

    pub fn invert_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            coords: pc.coords.iter().map(|&q| self.invert(q)).collect(),
            normals: pc.normals.clone(),
            source_id: pc.source_id.clone(),
        }
    }
}

/// Scales by the longest bounding-box edge so the cloud fits
/// `[padding, 1 - padding]^3`, centered. A cloud of identical points maps to
/// the cube center with scale 1.
pub fn normalize_to_unit_cube(
    pc: &PointCloud,
    padding: f64,
) -> Result<(PointCloud, NormalizeTransform), CloudError> {
    if !(0.0..=0.49).contains(&padding) {
        return Err(CloudError::Argument(format!(
            "padding {padding} outside [0, 0.49]"
        )));
    }
    let bbox = pc.bounding_box();
    let e = bbox.extent();
    let longest = e[0].max(e[1]).max(e[2]);
    let scale = if longest > 0.0 {
        (1.0 - 2.0 * padding) / longest
    } else {
        1.0
    };
    let c = bbox.center();
    let offset = [0.5 - c[0] * scale, 0.5 - c[1] * scale, 0.5 - c[2] * scale];
    let transform = NormalizeTransform {
        scale,
        offset,
        padding,
    };
    // Centering through (p - c) keeps degenerate axes exactly at 0.5.
    let coords = pc
        .coords
        .iter()
        .map(|p| {
            [
                (p[0] - c[0]) * scale + 0.5,
                (p[1] - c[1]) * scale + 0.5,
                (p[2] - c[2]) * scale + 0.5,
            ]
        })
        .collect();
    Ok((
        PointCloud {
            coords,
            normals: pc.normals.clone(),
            source_id: pc.source_id.clone(),
        },
        transform,
    ))
}

/// Maps unit-cube coordinates onto the `2^bits - 1` integer grid, merging
/// duplicate cells (first occurrence wins).
pub fn voxelize_quantize(pc: &PointCloud, bits: u32) -> Result<PointCloud, CloudError> {
    if !(1..=16).contains(&bits) {
        return Err(CloudError::Argument(format!("bits {bits} outside [1, 16]")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let mut seen = std::collections::HashSet::with_capacity(pc.len());
    let mut coords = Vec::with_capacity(pc.len());
    for (index, p) in pc.coords.iter().enumerate() {
        let mut cell = [0u32; 3];
        for a in 0..3 {
            let v = p[a];
            if !(0.0..=1.0).contains(&v) {
                return Err(CloudError::OutOfRange { index, value: v });
            }
            cell[a] = (v * levels).round() as u32;
        }
        if seen.insert(cell) {
            coords.push([cell[0] as f64, cell[1] as f64, cell[2] as f64]);
        }
    }
    PointCloud::new(coords, pc.source_id.clone())
}

/// Inverse of the grid mapping in [`voxelize_quantize`].
pub fn dequantize(pc: &PointCloud, bits: u32) -> PointCloud {
    let levels = ((1u32 << bits) - 1) as f64;
    PointCloud {
        coords: pc
            .coords
            .iter()
            .map(|p| [p[0] / levels, p[1] / levels, p[2] / levels])
            .collect(),
        normals: None,
        source_id: pc.source_id.clone(),
    }
}

/// Drops points whose distance to the centroid exceeds the given percentile
/// of all centroid distances. Off by default in preprocessing.
pub fn remove_radius_outliers(pc: &PointCloud, percentile: f64) -> Result<PointCloud, CloudError> {
    if !(0.0..=100.0).contains(&percentile) || percentile == 0.0 {
        return Err(CloudError::Argument(format!(
            "percentile {percentile} outside (0, 100]"
        )));
    }
    let c = pc.centroid();
    let dists: Vec<f64> = pc.coords.iter().map(|p| norm(sub(*p, c))).collect();
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile * n as f64) / 100.0).ceil().max(1.0) as usize;
    let cutoff = sorted[rank.min(n) - 1];
    let keep: Vec<usize> = (0..n).filter(|&i| dists[i] <= cutoff).collect();
    Ok(pc.select(&keep))
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn dist_sq(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}
