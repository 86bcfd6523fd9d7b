use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

pub const SPHERE_RADIUS: f64 = 1.0;
pub const CUBE_HALF: f64 = 1.0;
pub const CYLINDER_RADIUS: f64 = 0.6;
pub const CYLINDER_HALF_HEIGHT: f64 = 1.0;
pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.35;
/// Length of each wedge face along its in-plane axis and full height along z.
pub const WEDGE_LENGTH: f64 = 2.0;
pub const WEDGE_HALF_HEIGHT: f64 = 1.0;

pub const MIN_SHAPE_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    DihedralWedge,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::DihedralWedge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::DihedralWedge => "dihedral-wedge",
        }
    }

    /// Closed-form bounding-box diagonal of the surface.
    pub fn bbox_diagonal(self) -> f64 {
        match self {
            ShapeKind::Sphere => 2.0 * SPHERE_RADIUS * 3f64.sqrt(),
            ShapeKind::Cube => 2.0 * CUBE_HALF * 3f64.sqrt(),
            ShapeKind::Cylinder => {
                let d = 2.0 * CYLINDER_RADIUS;
                let h = 2.0 * CYLINDER_HALF_HEIGHT;
                (2.0 * d * d + h * h).sqrt()
            }
            ShapeKind::Torus => {
                let d = 2.0 * (TORUS_MAJOR + TORUS_MINOR);
                let h = 2.0 * TORUS_MINOR;
                (2.0 * d * d + h * h).sqrt()
            }
            ShapeKind::DihedralWedge => {
                let h = 2.0 * WEDGE_HALF_HEIGHT;
                (2.0 * WEDGE_LENGTH * WEDGE_LENGTH + h * h).sqrt()
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(self, p: &Vec3) -> f64 {
        match self {
            ShapeKind::Sphere => (p.norm() - SPHERE_RADIUS).abs(),
            ShapeKind::Cube => box_sdf(p, &Vec3::repeat(CUBE_HALF)).abs(),
            ShapeKind::Cylinder => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                let dx = rho - CYLINDER_RADIUS;
                let dz = p.z.abs() - CYLINDER_HALF_HEIGHT;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                (outside + dx.max(dz).min(0.0)).abs()
            }
            ShapeKind::Torus => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                ((rho - TORUS_MAJOR).hypot(p.z) - TORUS_MINOR).abs()
            }
            ShapeKind::DihedralWedge => {
                // Face A: y = 0, x in [0, L]; face B: x = 0, y in [0, L].
                let clamp_z = (p.z.abs() - WEDGE_HALF_HEIGHT).max(0.0);
                let out_a = (-p.x).max(p.x - WEDGE_LENGTH).max(0.0);
                let out_b = (-p.y).max(p.y - WEDGE_LENGTH).max(0.0);
                let da = (out_a * out_a + p.y * p.y + clamp_z * clamp_z).sqrt();
                let db = (out_b * out_b + p.x * p.x + clamp_z * clamp_z).sqrt();
                da.min(db)
            }
        }
    }

    /// Draws one area-uniform surface sample with its analytic outward normal.
    fn sample(self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match self {
            ShapeKind::Sphere => {
                let n = loop {
                    let v = Vec3::new(
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    );
                    let len = v.norm();
                    if len > 1e-12 {
                        break v / len;
                    }
                };
                (n * SPHERE_RADIUS, n)
            }
            ShapeKind::Cube => {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let u = rng.random_range(-CUBE_HALF..CUBE_HALF);
                let v = rng.random_range(-CUBE_HALF..CUBE_HALF);
                let mut p = Vec3::zeros();
                p[axis] = sign * CUBE_HALF;
                p[(axis + 1) % 3] = u;
                p[(axis + 2) % 3] = v;
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (p, n)
            }
            ShapeKind::Cylinder => {
                let side = 2.0 * PI * CYLINDER_RADIUS * 2.0 * CYLINDER_HALF_HEIGHT;
                let cap = PI * CYLINDER_RADIUS * CYLINDER_RADIUS;
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                let phi = rng.random_range(0.0..2.0 * PI);
                if pick < side {
                    let z = rng.random_range(-CYLINDER_HALF_HEIGHT..CYLINDER_HALF_HEIGHT);
                    let n = Vec3::new(phi.cos(), phi.sin(), 0.0);
                    (Vec3::new(CYLINDER_RADIUS * n.x, CYLINDER_RADIUS * n.y, z), n)
                } else {
                    let sign = if pick < side + cap { 1.0 } else { -1.0 };
                    let rho = CYLINDER_RADIUS * rng.random::<f64>().sqrt();
                    (
                        Vec3::new(rho * phi.cos(), rho * phi.sin(), sign * CYLINDER_HALF_HEIGHT),
                        Vec3::new(0.0, 0.0, sign),
                    )
                }
            }
            ShapeKind::Torus => {
                // Area element is proportional to (R + r cos t); rejection
                // sampling on t gives area-uniform samples.
                let t = loop {
                    let t = rng.random_range(0.0..2.0 * PI);
                    let accept = (TORUS_MAJOR + TORUS_MINOR * t.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                    if rng.random::<f64>() < accept {
                        break t;
                    }
                };
                let phi = rng.random_range(0.0..2.0 * PI);
                let n = Vec3::new(t.cos() * phi.cos(), t.cos() * phi.sin(), t.sin());
                let ring = Vec3::new(TORUS_MAJOR * phi.cos(), TORUS_MAJOR * phi.sin(), 0.0);
                (ring + n * TORUS_MINOR, n)
            }
            ShapeKind::DihedralWedge => {
                let s = rng.random_range(0.0..WEDGE_LENGTH);
                let z = rng.random_range(-WEDGE_HALF_HEIGHT..WEDGE_HALF_HEIGHT);
                if rng.random::<bool>() {
                    (Vec3::new(s, 0.0, z), Vec3::new(0.0, -1.0, 0.0))
                } else {
                    (Vec3::new(0.0, s, z), Vec3::new(-1.0, 0.0, 0.0))
                }
            }
        }
    }
}

fn box_sdf(p: &Vec3, half: &Vec3) -> f64 {
    let q = p.abs() - half;
    let outside = q.sup(&Vec3::zeros()).norm();
    outside + q.max().min(0.0)
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, n_points: usize, seed: u64) -> Self {
        ShapeSpec { kind, n_points, seed }
    }
}

/// Samples `spec.n_points` area-uniform points with analytic normals.
pub fn generate_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points < MIN_SHAPE_POINTS {
        return Err(Error::invalid(format!(
            "shapes need at least {MIN_SHAPE_POINTS} points, got {}",
            spec.n_points
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (points, normals) = (0..spec.n_points).map(|_| spec.kind.sample(&mut rng)).unzip();
    PointCloud::with_normals(points, normals)
}
