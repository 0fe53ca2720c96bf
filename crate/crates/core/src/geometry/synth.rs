use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use tokcomm_tensor::RandomSource;

use super::{norm, Point, PointCloud};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    CubeSurface,
    Torus,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::CubeSurface,
        ShapeKind::Torus,
        ShapeKind::Plane,
    ];
}

impl FromStr for ShapeKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "cube-surface" | "cube" => Ok(Self::CubeSurface),
            "torus" => Ok(Self::Torus),
            "plane" => Ok(Self::Plane),
            other => Err(CoreError::Argument(format!("unknown shape kind `{other}`"))),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sphere => "sphere",
            Self::CubeSurface => "cube-surface",
            Self::Torus => "torus",
            Self::Plane => "plane",
        })
    }
}

const CENTER: f64 = 0.5;
const TORUS_MAJOR: f64 = 0.35;
const TORUS_MINOR: f64 = 0.15;

/// `n` area-uniform surface samples with analytic normals. Every shape is
/// built inside the unit cube centred at (0.5, 0.5, 0.5).
pub fn synth_shape(kind: ShapeKind, n: usize, source: &mut RandomSource) -> Result<PointCloud> {
    if n < 8 {
        return Err(CoreError::Argument(format!("synthetic shapes need n >= 8, got {n}")));
    }
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    while points.len() < n {
        let (p, nrm) = match kind {
            ShapeKind::Sphere => {
                let d = loop {
                    let v = [source.normal(), source.normal(), source.normal()];
                    let l = norm(&v);
                    if l > 1e-12 {
                        break [v[0] / l, v[1] / l, v[2] / l];
                    }
                };
                (
                    [CENTER + 0.5 * d[0], CENTER + 0.5 * d[1], CENTER + 0.5 * d[2]],
                    d,
                )
            }
            ShapeKind::CubeSurface => {
                let face = source.index(6);
                let axis = face / 2;
                let side = (face % 2) as f64;
                let mut p = [
                    source.uniform(0.0, 1.0),
                    source.uniform(0.0, 1.0),
                    source.uniform(0.0, 1.0),
                ];
                p[axis] = side;
                let mut nrm = [0.0; 3];
                nrm[axis] = if side > 0.5 { 1.0 } else { -1.0 };
                (p, nrm)
            }
            ShapeKind::Torus => {
                let u = source.uniform(0.0, 2.0 * PI);
                let v = source.uniform(0.0, 2.0 * PI);
                // Rejection keeps the density uniform in surface area.
                let w = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if source.uniform(0.0, 1.0) > w {
                    continue;
                }
                let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                (
                    [
                        CENTER + ring * u.cos(),
                        CENTER + ring * u.sin(),
                        CENTER + TORUS_MINOR * v.sin(),
                    ],
                    [v.cos() * u.cos(), v.cos() * u.sin(), v.sin()],
                )
            }
            ShapeKind::Plane => (
                [source.uniform(0.0, 1.0), source.uniform(0.0, 1.0), CENTER],
                [0.0, 0.0, 1.0],
            ),
        };
        points.push(p);
        normals.push(nrm);
    }
    PointCloud::new(points)?.with_normals(normals)
}

/// Translates and uniformly scales so the bounding box is centred in the
/// unit cube with its largest side equal to one.
pub fn normalize_unit_cube(cloud: &PointCloud) -> Result<PointCloud> {
    let pts = cloud.points();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let s = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    let mid: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let points = pts
        .iter()
        .map(|p| {
            [
                CENTER + (p[0] - mid[0]) * s,
                CENTER + (p[1] - mid[1]) * s,
                CENTER + (p[2] - mid[2]) * s,
            ]
        })
        .collect();
    let out = PointCloud::new(points)?;
    match cloud.normals() {
        Some(n) => out.with_normals(n.to_vec()),
        None => Ok(out),
    }
}

/// `count` shapes cycling through all kinds, each with a random
/// anisotropic stretch and rotation, renormalised to the unit cube.
pub fn synth_dataset(count: usize, n: usize, source: &mut RandomSource) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let base = synth_shape(kind, n, source)?;
            let stretch = Matrix3::from_diagonal(&Vector3::new(
                source.uniform(0.5, 1.0),
                source.uniform(0.5, 1.0),
                source.uniform(0.5, 1.0),
            ));
            let axis = Unit::new_normalize(Vector3::new(
                source.normal(),
                source.normal(),
                source.normal() + 1e-9,
            ));
            let rot = Rotation3::from_axis_angle(&axis, source.uniform(0.0, 2.0 * PI));
            let lin = rot.matrix() * stretch;
            let normal_map = rot.matrix() * stretch.try_inverse().expect("positive diagonal");
            let c = Vector3::new(CENTER, CENTER, CENTER);
            let points: Vec<Point> = base
                .points()
                .iter()
                .map(|p| {
                    let q = lin * (Vector3::from(*p) - c) + c;
                    [q[0], q[1], q[2]]
                })
                .collect();
            let normals: Vec<Point> = base
                .normals()
                .expect("synthetic shapes carry normals")
                .iter()
                .map(|nrm| {
                    let q = (normal_map * Vector3::from(*nrm)).normalize();
                    [q[0], q[1], q[2]]
                })
                .collect();
            normalize_unit_cube(&PointCloud::new(points)?.with_normals(normals)?)
        })
        .collect()
}
