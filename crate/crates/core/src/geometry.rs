//! Exact k-nearest neighbours on a uniform grid, farthest-point sampling,
//! nearest-sample assignment and PCA normals.

use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::{dist_sq, dot, sub, BoundingBox, Point3, PointCloud};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("k = {k} exceeds reference size {n}")]
    TooManyNeighbors { k: usize, n: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Row `q` holds the `k` nearest reference indices of query `q`, ascending by
/// distance and then index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub distances_sq: Vec<f64>,
    /// Set when queries and reference are the same cloud, so each row
    /// starts with the query itself.
    pub includes_self: bool,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn row_dist_sq(&self, q: usize) -> &[f64] {
        &self.distances_sq[q * self.k..(q + 1) * self.k]
    }
}

/// Cell-bucketed copy of a reference set.
pub struct Grid<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let bbox = BoundingBox::of(points);
        let e = bbox.extent();
        let n = points.len().max(1) as f64;
        let longest = e[0].max(e[1]).max(e[2]);
        // Aim for ~2 points per occupied cell, assuming the cloud fills its
        // box along the non-degenerate axes.
        let mut vol = 1.0;
        let mut used = 0;
        for &x in &e {
            if x > longest * 1e-9 {
                vol *= x;
                used += 1;
            }
        }
        let mut cell = if used == 0 || longest <= 0.0 {
            1.0
        } else {
            (2.0 * vol / n).powf(1.0 / used as f64)
        };
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        let max_cells = (4 * points.len()).max(8) as f64;
        let mut dims = [1usize; 3];
        loop {
            for a in 0..3 {
                dims[a] = ((e[a] / cell).floor() as usize + 1).max(1);
            }
            if (dims[0] * dims[1] * dims[2]) as f64 <= max_cells {
                break;
            }
            cell *= 1.25;
        }
        let total = dims[0] * dims[1] * dims[2];
        let mut grid = Grid {
            points,
            origin: bbox.p_min,
            cell,
            dims,
            starts: vec![0; total + 1],
            order: vec![0; points.len()],
        };
        let cell_of: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_coords(*p))).collect();
        for &c in &cell_of {
            grid.starts[c + 1] += 1;
        }
        for c in 0..total {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in cell_of.iter().enumerate() {
            grid.order[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    fn cell_coords(&self, p: Point3) -> [usize; 3] {
        let mut c = [0; 3];
        for a in 0..3 {
            let x = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = if x <= 0.0 || !x.is_finite() {
                0
            } else {
                (x as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Exact k nearest; ties resolved towards the lower index.
    pub fn query(&self, q: Point3, k: usize, out: &mut Vec<(f64, usize)>) {
        out.clear();
        if k == 0 {
            return;
        }
        let c = self.cell_coords(q);
        let max_ring = self.dims.iter().copied().max().unwrap();
        for r in 0..=max_ring {
            let lo: [isize; 3] = std::array::from_fn(|a| c[a] as isize - r as isize);
            let hi: [isize; 3] = std::array::from_fn(|a| c[a] as isize + r as isize);
            let clo: [usize; 3] = std::array::from_fn(|a| lo[a].max(0) as usize);
            let chi: [usize; 3] =
                std::array::from_fn(|a| (hi[a].min(self.dims[a] as isize - 1)) as usize);
            for z in clo[2]..=chi[2] {
                for y in clo[1]..=chi[1] {
                    for x in clo[0]..=chi[0] {
                        let ring = (x as isize - c[0] as isize)
                            .abs()
                            .max((y as isize - c[1] as isize).abs())
                            .max((z as isize - c[2] as isize).abs());
                        if ring as usize != r {
                            continue;
                        }
                        let f = self.flat([x, y, z]);
                        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
                            insert_best(out, k, (dist_sq(q, self.points[i]), i));
                        }
                    }
                }
            }
            // Distance from q to the nearest face of the visited box that
            // still has cells beyond it.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    let face = self.origin[a] + lo[a] as f64 * self.cell;
                    bound = bound.min(q[a] - face);
                }
                if hi[a] < self.dims[a] as isize - 1 {
                    let face = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    bound = bound.min(face - q[a]);
                }
            }
            if bound == f64::INFINITY {
                break;
            }
            if out.len() == k {
                let worst = out[k - 1].0;
                let b = bound.max(0.0);
                if b * b > worst {
                    break;
                }
            }
        }
    }
}

fn insert_best(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let less = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    if best.len() == k && !less(&cand, &best[k - 1]) {
        return;
    }
    let pos = best.partition_point(|e| less(e, &cand));
    if best.len() == k {
        best.pop();
    }
    best.insert(pos, cand);
}

const PARALLEL_MIN_QUERIES: usize = 2048;

pub fn knn_points(
    reference: &[Point3],
    queries: &[Point3],
    k: usize,
) -> Result<NeighborIndex, GeometryError> {
    if k > reference.len() {
        return Err(GeometryError::TooManyNeighbors {
            k,
            n: reference.len(),
        });
    }
    let grid = Grid::new(reference);
    let run = |q: &Point3| {
        let mut best = Vec::with_capacity(k + 1);
        grid.query(*q, k, &mut best);
        best
    };
    let rows: Vec<Vec<(f64, usize)>> = if queries.len() >= PARALLEL_MIN_QUERIES {
        queries.par_iter().map(run).collect()
    } else {
        queries.iter().map(run).collect()
    };
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut distances_sq = Vec::with_capacity(queries.len() * k);
    for row in rows {
        for (d, i) in row {
            indices.push(i);
            distances_sq.push(d);
        }
    }
    Ok(NeighborIndex {
        k,
        distances: distances_sq.iter().map(|d| d.sqrt()).collect(),
        indices,
        distances_sq,
        includes_self: false,
    })
}

pub fn knn(
    reference: &PointCloud,
    queries: &PointCloud,
    k: usize,
) -> Result<NeighborIndex, GeometryError> {
    knn_points(reference.coords(), queries.coords(), k)
}

/// k nearest within one cloud; each row's first entry is the point itself
/// unless an exact duplicate with a lower index exists.
pub fn knn_self(pc: &PointCloud, k: usize) -> Result<NeighborIndex, GeometryError> {
    let mut idx = knn_points(pc.coords(), pc.coords(), k)?;
    idx.includes_self = true;
    Ok(idx)
}

/// Index of the nearest reference point for every query.
pub fn nearest_indices(reference: &[Point3], queries: &[Point3]) -> Vec<usize> {
    knn_points(reference, queries, 1)
        .expect("reference is non-empty")
        .indices
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Half,
    Third,
    Quarter,
}

impl Factor {
    pub fn denominator(self) -> usize {
        match self {
            Factor::Half => 2,
            Factor::Third => 3,
            Factor::Quarter => 4,
        }
    }

    pub fn from_denominator(d: usize) -> Option<Factor> {
        match d {
            2 => Some(Factor::Half),
            3 => Some(Factor::Third),
            4 => Some(Factor::Quarter),
            _ => None,
        }
    }

    /// `ceil(n / den)`.
    pub fn apply(self, n: usize) -> usize {
        n.div_ceil(self.denominator())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSize {
    Factor(Factor),
    Target(usize),
}

/// Farthest-point sampling seeded at the point nearest the centroid.
/// Returns sample indices in emission order.
pub fn farthest_point_sample(points: &[Point3], m: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n as f64;
    }
    let mut first = 0;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist_sq(*p, c);
        if d < best {
            best = d;
            first = i;
        }
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..m {
        selected.push(current);
        // Chosen points never win again, even among coincident duplicates.
        min_d[current] = f64::NEG_INFINITY;
        let anchor = points[current];
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist_sq(*p, anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > far {
                far = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    selected
}

pub fn downsample(
    pc: &PointCloud,
    size: SampleSize,
) -> Result<(Vec<usize>, PointCloud), GeometryError> {
    let m = match size {
        SampleSize::Factor(f) => f.apply(pc.len()),
        SampleSize::Target(m) => m,
    };
    if m == 0 || m > pc.len() {
        return Err(GeometryError::Argument(format!(
            "sample size {m} not in [1, {}]",
            pc.len()
        )));
    }
    let idx = farthest_point_sample(pc.coords(), m);
    let sampled = pc.select(&idx);
    Ok((idx, sampled))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap {
    /// `assign[j]` = nearest downsampled index of original point `j`.
    pub assign: Vec<usize>,
    /// `buckets[i]` = original indices mapped to sample `i`, ascending.
    pub buckets: Vec<Vec<usize>>,
}

impl AssignmentMap {
    pub fn from_assign(assign: Vec<usize>, m: usize) -> Self {
        let mut buckets = vec![Vec::new(); m];
        for (j, &i) in assign.iter().enumerate() {
            buckets[i].push(j);
        }
        let map = Self { assign, buckets };
        debug_assert!(map.is_partition());
        map
    }

    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.assign.len()];
        let mut total = 0;
        for (i, b) in self.buckets.iter().enumerate() {
            for &j in b {
                if j >= seen.len() || seen[j] || self.assign[j] != i {
                    return false;
                }
                seen[j] = true;
                total += 1;
            }
        }
        total == self.assign.len()
    }
}

pub fn nearest_assignment_points(original: &[Point3], downsampled: &[Point3]) -> AssignmentMap {
    AssignmentMap::from_assign(nearest_indices(downsampled, original), downsampled.len())
}

pub fn nearest_assignment(original: &PointCloud, downsampled: &PointCloud) -> AssignmentMap {
    nearest_assignment_points(original.coords(), downsampled.coords())
}

/// PCA normals from the k-neighbourhood (self included). The returned flags
/// mark neighbourhoods of rank < 2, whose normal is set to +z.
pub fn estimate_normals(
    pc: &PointCloud,
    k: usize,
) -> Result<(PointCloud, Vec<bool>), GeometryError> {
    if k < 1 || k > pc.len() {
        return Err(GeometryError::TooManyNeighbors { k, n: pc.len() });
    }
    let nbrs = knn_self(pc, k)?;
    let pts = pc.coords();
    let mut normals = Vec::with_capacity(pts.len());
    let mut degenerate = Vec::with_capacity(pts.len());
    for q in 0..pts.len() {
        let row = nbrs.row(q);
        let mut mean = [0.0; 3];
        for &j in row {
            for a in 0..3 {
                mean[a] += pts[j][a];
            }
        }
        for v in &mut mean {
            *v /= row.len() as f64;
        }
        let mut cov = nalgebra::Matrix3::<f64>::zeros();
        for &j in row {
            let d = sub(pts[j], mean);
            for r in 0..3 {
                for c in 0..3 {
                    cov[(r, c)] += d[r] * d[c];
                }
            }
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let l_mid = eig.eigenvalues[order[1]];
        let l_max = eig.eigenvalues[order[2]];
        if !(l_max > 1e-300) || l_mid <= 1e-10 * l_max {
            normals.push([0.0, 0.0, 1.0]);
            degenerate.push(true);
            continue;
        }
        let v = eig.eigenvectors.column(order[0]);
        let len = v.norm();
        let mut n = [v[0] / len, v[1] / len, v[2] / len];
        if dot(n, sub(pts[q], mean)) < 0.0 {
            n = [-n[0], -n[1], -n[2]];
        }
        normals.push(n);
        degenerate.push(false);
    }
    let out = pc
        .clone()
        .with_normals(normals)
        .map_err(|e| GeometryError::Argument(e.to_string()))?;
    Ok((out, degenerate))
}
