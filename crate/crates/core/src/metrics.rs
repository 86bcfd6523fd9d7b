//! Evaluation metrics, error-map export, metric reports and the classical
//! baselines the learned model is compared against.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_shape, write_xyz_colored, ShapeKind, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals_pca, KdTree, PointCloud, Vec3};

/// Version tag written at the top of every metrics report.
pub const REPORT_FORMAT: &str = "# pcdnf-metrics v1";

/// Default saturation of the error-map colormap, degrees.
pub const DEFAULT_ERROR_CAP_DEG: f64 = 30.0;

/// Reference points per predicted point for the sampled surface surrogate.
pub const DENSE_REFERENCE_FACTOR: usize = 10;

fn mean_nn_sq(from: &[Vec3], tree: &KdTree) -> f64 {
    let sum: f64 = from
        .par_iter()
        .map(|p| tree.nearest_one(p).expect("nonempty tree").1)
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    sum / from.len() as f64
}

/// Halved sum of the mean squared nearest-neighbor distances in both
/// directions, with both clouds scaled by `1/diag(b)`.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs nonempty clouds"));
    }
    let d = b.diag();
    if !(d > 0.0) {
        return Err(Error::invalid("reference cloud has a zero diagonal"));
    }
    let ta = KdTree::new(a.points());
    let tb = KdTree::new(b.points());
    let ab = mean_nn_sq(a.points(), &tb);
    let ba = mean_nn_sq(b.points(), &ta);
    Ok(0.5 * (ab + ba) / (d * d))
}

/// What predicted points are measured against.
#[derive(Debug, Clone, Copy)]
pub enum SurfaceReference<'a> {
    /// Closed-form distance to a generator surface.
    Analytic(ShapeKind),
    /// Nearest-point distance to a densely sampled reference cloud.
    Cloud(&'a PointCloud),
}

/// Mean distance from `a` to the reference surface, divided by the
/// reference's bounding-box diagonal.
pub fn point_to_surface(a: &PointCloud, reference: SurfaceReference<'_>) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("point-to-surface needs a nonempty cloud"));
    }
    let n = a.len() as f64;
    match reference {
        SurfaceReference::Analytic(kind) => {
            let sum: f64 = a.points().iter().map(|p| kind.distance(p)).sum();
            Ok(sum / n / kind.bbox_diagonal())
        }
        SurfaceReference::Cloud(r) => {
            if r.is_empty() {
                return Err(Error::invalid("reference cloud is empty"));
            }
            let tree = KdTree::new(r.points());
            let d: Vec<f64> = a
                .points()
                .par_iter()
                .map(|p| tree.nearest_one(p).expect("nonempty").1.sqrt())
                .collect();
            Ok(d.iter().sum::<f64>() / n / r.diag())
        }
    }
}

/// A reference sampling of `kind` with `factor × n_points` points.
pub fn dense_reference(kind: ShapeKind, n_points: usize, factor: usize, seed: u64) -> Result<PointCloud> {
    generate_shape(&ShapeSpec::new(kind, n_points * factor, seed))
}

/// Unoriented angle per pair, degrees.
pub fn angular_errors(estimated: &[Vec3], truth: &[Vec3]) -> Result<Vec<f64>> {
    if estimated.len() != truth.len() {
        return Err(Error::invalid(format!(
            "normal count mismatch: {} vs {}",
            estimated.len(),
            truth.len()
        )));
    }
    Ok(estimated
        .iter()
        .zip(truth)
        // atan2 form of arccos(|a·b|): exact at zero angle.
        .map(|(a, b)| a.cross(b).norm().atan2(a.dot(b).abs()).to_degrees())
        .collect())
}

/// Root mean square of the unoriented angular errors, degrees.
pub fn normal_rmse(estimated: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    let e = angular_errors(estimated, truth)?;
    if e.is_empty() {
        return Err(Error::invalid("normal RMSE needs at least one pair"));
    }
    Ok((e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt())
}

/// Linear blue→red ramp over `[0, cap]`.
pub fn error_color(value: f64, cap: f64) -> [f64; 3] {
    let t = (value / cap).clamp(0.0, 1.0);
    [t, 0.0, 1.0 - t]
}

/// Writes `cloud` as `.xyz` with an RGB column coding `errors`.
pub fn export_error_map(cloud: &PointCloud, errors: &[f64], cap: f64, path: impl AsRef<Path>) -> Result<()> {
    if errors.len() != cloud.len() {
        return Err(Error::invalid(format!(
            "{} errors for {} points",
            errors.len(),
            cloud.len()
        )));
    }
    if !(cap > 0.0) {
        return Err(Error::invalid("error-map cap must be positive"));
    }
    let colors: Vec<[f64; 3]> = errors.iter().map(|&e| error_color(e, cap)).collect();
    write_xyz_colored(path, cloud, &colors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub shape: String,
    pub noise_level: f64,
    pub iteration: usize,
    pub cd: f64,
    pub p2s: f64,
    pub rmse_deg: f64,
}

/// Metrics table with the configuration that produced it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    /// `key = value` lines echoed as comments.
    pub config: Vec<(String, String)>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{REPORT_FORMAT}").expect("string write");
        writeln!(s, "# CD = 0.5*mean_a min_b |a-b|^2 + 0.5*mean_b min_a |a-b|^2 after scaling by 1/diag(clean)")
            .expect("string write");
        for (k, v) in &self.config {
            writeln!(s, "# {k} = {v}").expect("string write");
        }
        s.push_str("shape,noise_level,iteration,CD,P2S,RMSE_deg\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.12e},{:.12e},{:.12e}",
                r.shape, r.noise_level, r.iteration, r.cd, r.p2s, r.rmse_deg
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn plane_fit(points: &[Vec3], idx: &[usize]) -> (Vec3, Vec3) {
    let c = idx.iter().map(|&j| points[j]).sum::<Vec3>() / idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &j in idx {
        let d = points[j] - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("3 eigenvalues");
    (c, eig.eigenvectors.column(imin).into_owned())
}

/// Baseline denoiser: each point projected onto the PCA plane of its `k`
/// nearest neighbors.
pub fn pca_projection(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if k < 3 || k > cloud.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 3..={}", cloud.len())));
    }
    let pts = cloud.points();
    let tree = KdTree::new(pts);
    let out: Vec<Vec3> = pts
        .par_iter()
        .map(|p| {
            let idx: Vec<usize> = tree.nearest(p, k).into_iter().map(|(i, _)| i).collect();
            let (c, n) = plane_fit(pts, &idx);
            p - n * (p - c).dot(&n)
        })
        .collect();
    PointCloud::new(out)
}

/// Baseline denoiser: bilateral point update along PCA normals, repeated
/// `iterations` times. Spatial bandwidth is the mean neighbor distance and
/// the range bandwidth the spread of normal offsets.
pub fn bilateral_filter(cloud: &PointCloud, k: usize, iterations: usize) -> Result<PointCloud> {
    let mut current = cloud.clone();
    current.clear_normals();
    for _ in 0..iterations {
        let normals = estimate_normals_pca(&current, k)?.normals;
        let pts = current.points();
        let tree = KdTree::new(pts);
        let out: Vec<Vec3> = pts
            .par_iter()
            .zip(&normals)
            .map(|(p, n)| {
                let nb = tree.nearest(p, k);
                let sigma_c = nb.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / nb.len() as f64;
                let offsets: Vec<f64> = nb.iter().map(|&(j, _)| (pts[j] - p).dot(n)).collect();
                let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
                let var = offsets.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / offsets.len() as f64;
                let sigma_s = var.sqrt().max(1e-12);
                let (mut num, mut den) = (0.0, 0.0);
                for (&(_, d2), &h) in nb.iter().zip(&offsets) {
                    let w = (-d2 / (2.0 * sigma_c * sigma_c)).exp() * (-h * h / (2.0 * sigma_s * sigma_s)).exp();
                    num += w * h;
                    den += w;
                }
                if den > 0.0 {
                    p + n * (num / den)
                } else {
                    *p
                }
            })
            .collect();
        current = PointCloud::new(out)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::add_gaussian_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn chamfer_identity_and_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cloud(200, &mut rng);
        let b = random_cloud(150, &mut rng);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        let d = b.diag();
        let side = |x: &PointCloud, y: &PointCloud| {
            x.points()
                .iter()
                .map(|p| y.points().iter().map(|q| ((p - q) / d).norm_squared()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        let oracle = 0.5 * side(&a, &b) + 0.5 * side(&b, &a);
        assert!((chamfer_distance(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn chamfer_shifted_lattice() {
        // Spacing 1, shift 0.25: every nearest neighbor lies 0.25 away.
        let a: Vec<Vec3> = (0..1000).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let b: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(0.25, 0.0, 0.0)).collect();
        let a = PointCloud::new(a).unwrap();
        let b = PointCloud::new(b).unwrap();
        let shift = 0.25 / b.diag();
        assert!((chamfer_distance(&a, &b).unwrap() - shift * shift).abs() < 1e-18);
    }

    #[test]
    fn p2s_examples() {
        let sphere = generate_shape(&ShapeSpec::new(ShapeKind::Sphere, 500, 1)).unwrap();
        assert!(point_to_surface(&sphere, SurfaceReference::Analytic(ShapeKind::Sphere)).unwrap() < 1e-9);
        let off = PointCloud::new(vec![Vec3::new(1.0, -0.3, 0.0)]).unwrap();
        let p2s = point_to_surface(&off, SurfaceReference::Analytic(ShapeKind::DihedralWedge)).unwrap();
        assert!((p2s - 0.3 / ShapeKind::DihedralWedge.bbox_diagonal()).abs() < 1e-15);
    }

    #[test]
    fn rmse_examples() {
        let n = vec![Vec3::z(), Vec3::x()];
        assert_eq!(normal_rmse(&n, &n).unwrap(), 0.0);
        let flipped: Vec<Vec3> = n.iter().map(|v| -v).collect();
        assert_eq!(normal_rmse(&flipped, &n).unwrap(), 0.0);
        let a = 10f64.to_radians();
        let tilted = vec![Vec3::new(a.sin(), 0.0, a.cos()), Vec3::new(a.cos(), a.sin(), 0.0)];
        assert!((normal_rmse(&tilted, &n).unwrap() - 10.0).abs() < 1e-9);
        assert!(normal_rmse(&n[..1], &n).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(error_color(0.0, 30.0), [0.0, 0.0, 1.0]);
        assert_eq!(error_color(45.0, 30.0), [1.0, 0.0, 0.0]);
        assert_eq!(error_color(15.0, 30.0), [0.5, 0.0, 0.5]);
    }

    #[test]
    fn error_map_checks_length() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::x()]).unwrap();
        assert!(export_error_map(&cloud, &[1.0], 30.0, dir.path().join("e.xyz")).is_err());
        export_error_map(&cloud, &[0.0, 30.0], 30.0, dir.path().join("e.xyz")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("e.xyz")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().ends_with("0.000000 0.000000 1.000000"));
    }

    #[test]
    fn baselines_reduce_noise_on_cube() {
        let clean = generate_shape(&ShapeSpec::new(ShapeKind::Cube, 2000, 1)).unwrap();
        let noisy = add_gaussian_noise(&clean, 0.01, 2).unwrap().noisy;
        let base = chamfer_distance(&noisy, &clean).unwrap();
        let pca = chamfer_distance(&pca_projection(&noisy, 16).unwrap(), &clean).unwrap();
        let bil = chamfer_distance(&bilateral_filter(&noisy, 16, 2).unwrap(), &clean).unwrap();
        assert!(pca < base, "{pca} vs {base}");
        assert!(bil < base, "{bil} vs {base}");
    }

    #[test]
    fn report_header_and_columns() {
        let r = MetricsReport {
            config: vec![("seed".into(), "1".into())],
            rows: vec![MetricsRow {
                shape: "cube".into(),
                noise_level: 0.01,
                iteration: 1,
                cd: 0.0,
                p2s: 0.0,
                rmse_deg: 0.0,
            }],
        };
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_FORMAT));
        assert!(csv.contains("# seed = 1\nshape,noise_level,iteration,CD,P2S,RMSE_deg\ncube,0.01,1,"));
    }
}
