use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{knn, PointCloud};
use crate::error::{CoreError, Result};

pub const DEFAULT_NORMAL_K: usize = 16;

/// Cloud with estimated normals plus a per-point flag for neighbourhoods
/// whose covariance has rank below two.
#[derive(Clone, Debug)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: Vec<bool>,
}

impl NormalEstimate {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// PCA normals: the eigenvector of the smallest covariance eigenvalue over
/// each point's `k` nearest neighbours (itself included). Sign is arbitrary.
/// Degenerate neighbourhoods fall back to (0, 0, 1).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    if k < 3 {
        return Err(CoreError::Argument(format!("normal estimation needs k >= 3, got {k}")));
    }
    let pts = cloud.points();
    let k = k.min(pts.len());
    let table = knn(pts, pts, k)?;
    let mut normals = Vec::with_capacity(pts.len());
    let mut degenerate = Vec::with_capacity(pts.len());
    for r in 0..pts.len() {
        let nbrs = table.row(r);
        let mut mean = Vector3::zeros();
        for &i in nbrs {
            mean += Vector3::from(pts[i]);
        }
        mean /= nbrs.len() as f64;
        let mut cov = Matrix3::zeros();
        for &i in nbrs {
            let d = Vector3::from(pts[i]) - mean;
            cov += d * d.transpose();
        }
        cov /= nbrs.len() as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let largest = eig.eigenvalues[order[2]];
        let middle = eig.eigenvalues[order[1]];
        if largest <= 0.0 || middle <= 1e-10 * largest {
            normals.push([0.0, 0.0, 1.0]);
            degenerate.push(true);
            continue;
        }
        let v = eig.eigenvectors.column(order[0]).normalize();
        normals.push([v[0], v[1], v[2]]);
        degenerate.push(false);
    }
    Ok(NormalEstimate {
        cloud: cloud.without_normals().with_normals(normals)?,
        degenerate,
    })
}
