//! Point-cloud containers and the non-learned geometric kernels.

mod io;
mod normals;
mod sampling;
mod synth;

pub use io::{read_binary, read_cloud, read_ply, write_binary, write_cloud, write_ply, BINARY_MAGIC};
pub use normals::{estimate_normals, NormalEstimate, DEFAULT_NORMAL_K};
pub use sampling::{ball_query, fps, knn, FpsStart};
pub use synth::{normalize_unit_cube, synth_dataset, synth_shape, ShapeKind};

use tokcomm_tensor::Tensor;

use crate::error::{CoreError, Result};

pub type Point = [f64; 3];

pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm(a: &Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Ordered 3-D points with optional unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    normals: Option<Vec<Point>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::Argument("point cloud must hold at least one point".into()));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    /// Attaches normals; each must have unit length within 1e-9.
    pub fn with_normals(mut self, normals: Vec<Point>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(CoreError::Argument(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(bad) = normals.iter().find(|n| (norm(n) - 1.0).abs() > 1e-9) {
            return Err(CoreError::Argument(format!("normal {bad:?} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return Err(CoreError::Argument(format!("expected N x 3, got {:?}", t.shape())));
        }
        Self::new(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.points.len(), 3],
            self.points.iter().flatten().copied().collect(),
        )
        .expect("N x 3 layout")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Point]> {
        self.normals.as_deref()
    }

    pub fn without_normals(&self) -> Self {
        Self {
            points: self.points.clone(),
            normals: None,
        }
    }

    /// Largest absolute coordinate value.
    pub fn peak(&self) -> f64 {
        self.points
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Centroids picked from a parent set: their indices and coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub indices: Vec<usize>,
    pub coords: Vec<Point>,
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fixed-arity neighbour lists, one row of `k` indices per query.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub k: usize,
    /// Row-major `queries × k` indices into the reference set.
    pub indices: Vec<usize>,
    /// Neighbour coordinate minus query coordinate, same layout as `indices`.
    pub relative: Vec<Point>,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[r * self.k..(r + 1) * self.k]
    }
}
